//! Interaction logs: parsing, k-core filtering, leave-one-out splitting,
//! fixed-length windows and a processed-dataset cache.
//!
//! Cache format (UTF-8 text, one record per line, tab separated):
//!
//! ```text
//! MLSA-DATASET 1
//! items <n>
//! <original item id>          # n lines, dense ids 1..=n in order
//! users <m>
//! <original user id>\t<dense item ids separated by spaces, oldest first>
//! ```

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MlsaError, Result};
use crate::model::PADDING_ID;

pub const CACHE_HEADER: &str = "MLSA-DATASET 1";

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionRecord {
    pub user: String,
    pub item: String,
    pub rating: f32,
    pub timestamp: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    /// `UserID::MovieID::Rating::Timestamp`
    MovieLens,
    /// `user,item,rating,timestamp`
    Amazon,
}

impl FromStr for DatasetKind {
    type Err = MlsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "movielens" | "ml-1m" | "ml1m" => Ok(DatasetKind::MovieLens),
            "amazon" | "beauty" | "amazon-beauty" | "games" | "video-games" | "amazon-video-games" => {
                Ok(DatasetKind::Amazon)
            }
            _ => Err(MlsaError::config(format!("unknown dataset kind {s:?} (movielens, amazon)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FilterMode {
    /// Repeat until every user and item meets the threshold.
    #[default]
    Fixpoint,
    /// Drop users and items below the threshold once, from the raw counts.
    OnePass,
}

impl FromStr for FilterMode {
    type Err = MlsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fixpoint" | "iterative" => Ok(FilterMode::Fixpoint),
            "one-pass" | "onepass" | "once" => Ok(FilterMode::OnePass),
            _ => Err(MlsaError::config(format!("unknown filter mode {s:?} (fixpoint, one-pass)"))),
        }
    }
}

impl fmt::Display for FilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterMode::Fixpoint => "fixpoint",
            FilterMode::OnePass => "one-pass",
        })
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| MlsaError::io(path, e))
}

pub fn parse_movielens(path: &Path) -> Result<Vec<InteractionRecord>> {
    parse_movielens_reader(open(path)?, path)
}

pub fn parse_amazon(path: &Path) -> Result<Vec<InteractionRecord>> {
    parse_amazon_reader(open(path)?, path)
}

pub fn parse(kind: DatasetKind, path: &Path) -> Result<Vec<InteractionRecord>> {
    match kind {
        DatasetKind::MovieLens => parse_movielens(path),
        DatasetKind::Amazon => parse_amazon(path),
    }
}

/// `origin` only labels errors.
pub fn parse_movielens_reader(r: impl Read, origin: &Path) -> Result<Vec<InteractionRecord>> {
    parse_lines(r, origin, |line| {
        let f: Vec<&str> = line.split("::").collect();
        if f.len() != 4 {
            return Err(format!("expected 4 '::'-separated fields, found {}", f.len()));
        }
        Ok([f[0], f[1], f[2], f[3]])
    })
}

/// `origin` only labels errors.
pub fn parse_amazon_reader(r: impl Read, origin: &Path) -> Result<Vec<InteractionRecord>> {
    parse_lines(r, origin, |line| {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(format!("expected 4 comma-separated fields, found {}", f.len()));
        }
        Ok([f[0], f[1], f[2], f[3]])
    })
}

fn parse_lines(
    r: impl Read,
    origin: &Path,
    split: impl Fn(&str) -> std::result::Result<[&str; 4], String>,
) -> Result<Vec<InteractionRecord>> {
    let mut out = Vec::new();
    let err = |line: usize, message: String| MlsaError::Parse { path: origin.to_path_buf(), line, message };
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line.map_err(|e| MlsaError::io(origin, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let [user, item, rating, ts] = split(line).map_err(|m| err(i + 1, m))?;
        let (user, item) = (user.trim(), item.trim());
        if user.is_empty() || item.is_empty() {
            return Err(err(i + 1, "empty user or item id".into()));
        }
        let rating = rating.trim().parse::<f32>().map_err(|_| err(i + 1, format!("bad rating {rating:?}")))?;
        let timestamp = ts.trim().parse::<u64>().map_err(|_| err(i + 1, format!("bad timestamp {ts:?}")))?;
        out.push(InteractionRecord { user: user.to_string(), item: item.to_string(), rating, timestamp });
    }
    Ok(out)
}

fn degrees<'a>(
    records: impl Iterator<Item = &'a InteractionRecord>,
) -> (HashMap<&'a str, usize>, HashMap<&'a str, usize>) {
    let (mut users, mut items) = (HashMap::new(), HashMap::new());
    for r in records {
        *users.entry(r.user.as_str()).or_insert(0) += 1;
        *items.entry(r.item.as_str()).or_insert(0) += 1;
    }
    (users, items)
}

/// Keeps records whose user and item both have at least `k` interactions,
/// per `mode`. File order is preserved.
pub fn kcore_filter_with(records: &[InteractionRecord], k: usize, mode: FilterMode) -> Result<Vec<InteractionRecord>> {
    if k == 0 {
        return Err(MlsaError::config("k must be >= 1"));
    }
    let mut alive = vec![true; records.len()];
    loop {
        let (users, items) = degrees(records.iter().zip(&alive).filter(|(_, &a)| a).map(|(r, _)| r));
        let mut changed = false;
        for (r, a) in records.iter().zip(alive.iter_mut()) {
            if *a && (users[r.user.as_str()] < k || items[r.item.as_str()] < k) {
                *a = false;
                changed = true;
            }
        }
        if !changed || mode == FilterMode::OnePass {
            break;
        }
    }
    Ok(records.iter().zip(&alive).filter(|(_, &a)| a).map(|(r, _)| r.clone()).collect())
}

/// Fixpoint k-core filter.
pub fn kcore_filter(records: &[InteractionRecord], k: usize) -> Result<Vec<InteractionRecord>> {
    kcore_filter_with(records, k, FilterMode::Fixpoint)
}

/// Whether every user and item in `records` has at least `k` interactions.
pub fn satisfies_kcore(records: &[InteractionRecord], k: usize) -> bool {
    let (users, items) = degrees(records.iter());
    users.values().chain(items.values()).all(|&d| d >= k)
}

/// Chronological item sequences with dense ids (items from 1, 0 is padding).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    /// `item_ids[i]` is the original id of dense item `i`; index 0 is padding.
    item_ids: Vec<String>,
    user_ids: Vec<String>,
    sequences: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSplit {
    pub train: Vec<usize>,
    pub valid: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub users: Vec<UserSplit>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_length: f64,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} users, {} items, {} interactions, avg {:.1}",
            self.users, self.items, self.interactions, self.avg_length
        )
    }
}

impl Dataset {
    /// Sequences over dense ids `1..=item_ids.len()`; `item_ids[j]` names id `j + 1`.
    pub fn new(item_ids: Vec<String>, user_ids: Vec<String>, sequences: Vec<Vec<usize>>) -> Result<Self> {
        if user_ids.len() != sequences.len() {
            return Err(MlsaError::Data("one sequence per user required".into()));
        }
        let n = item_ids.len();
        if let Some(bad) = sequences.iter().flatten().find(|&&i| i == PADDING_ID || i > n) {
            return Err(MlsaError::Data(format!("item id {bad} outside 1..={n}")));
        }
        let mut ids = Vec::with_capacity(n + 1);
        ids.push(String::new());
        ids.extend(item_ids);
        Ok(Dataset { item_ids: ids, user_ids, sequences })
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len() - 1
    }

    /// Items plus the padding id.
    pub fn vocab_size(&self) -> usize {
        self.item_ids.len()
    }

    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn sequences(&self) -> &[Vec<usize>] {
        &self.sequences
    }

    pub fn item_id(&self, dense: usize) -> Option<&str> {
        (dense != PADDING_ID).then(|| self.item_ids.get(dense).map(String::as_str)).flatten()
    }

    pub fn user_id(&self, index: usize) -> Option<&str> {
        self.user_ids.get(index).map(String::as_str)
    }

    /// Leave-one-out: last item tests, second-last validates, the rest trains.
    pub fn split(&self) -> Result<Split> {
        let users = self
            .sequences
            .iter()
            .enumerate()
            .map(|(u, s)| {
                if s.len() < 3 {
                    return Err(MlsaError::Split(format!(
                        "user {:?} has {} interactions, need at least 3",
                        self.user_ids[u],
                        s.len()
                    )));
                }
                let n = s.len();
                Ok(UserSplit { train: s[..n - 2].to_vec(), valid: s[n - 2], test: s[n - 1] })
            })
            .collect::<Result<_>>()?;
        Ok(Split { users })
    }

    pub fn stats(&self) -> DatasetStats {
        dataset_stats(self)
    }

    pub fn write_cache(&self, mut w: impl Write) -> Result<()> {
        let io = |e| MlsaError::io("<dataset cache>", e);
        for id in self.item_ids.iter().skip(1).chain(&self.user_ids) {
            if id.contains(['\t', '\n', '\r']) {
                return Err(MlsaError::Data(format!("id {id:?} contains a tab or newline")));
            }
        }
        writeln!(w, "{CACHE_HEADER}").map_err(io)?;
        writeln!(w, "items {}", self.num_items()).map_err(io)?;
        for id in &self.item_ids[1..] {
            writeln!(w, "{id}").map_err(io)?;
        }
        writeln!(w, "users {}", self.num_users()).map_err(io)?;
        for (u, seq) in self.user_ids.iter().zip(&self.sequences) {
            let items: Vec<String> = seq.iter().map(usize::to_string).collect();
            writeln!(w, "{u}\t{}", items.join(" ")).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_cache(r: impl Read, origin: &Path) -> Result<Self> {
        let mut lines = BufReader::new(r).lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, Ok(l))) => Ok((i + 1, l)),
                Some((i, Err(e))) => {
                    Err(MlsaError::Parse { path: origin.to_path_buf(), line: i + 1, message: e.to_string() })
                }
                None => Err(MlsaError::Parse {
                    path: origin.to_path_buf(),
                    line: 0,
                    message: format!("unexpected end of file, expected {what}"),
                }),
            }
        };
        let perr = |line: usize, message: String| MlsaError::Parse { path: origin.to_path_buf(), line, message };
        let (n, header) = next("header")?;
        if header != CACHE_HEADER {
            return Err(perr(n, format!("expected {CACHE_HEADER:?}, found {header:?}")));
        }
        let count = |line: usize, text: &str, key: &str| -> Result<usize> {
            text.strip_prefix(key)
                .and_then(|t| t.trim().parse().ok())
                .ok_or_else(|| perr(line, format!("expected '{key} <count>'")))
        };
        let (n, l) = next("item count")?;
        let items = count(n, &l, "items ")?;
        let mut item_ids = Vec::with_capacity(items);
        for _ in 0..items {
            item_ids.push(next("item id")?.1);
        }
        let (n, l) = next("user count")?;
        let users = count(n, &l, "users ")?;
        let (mut user_ids, mut sequences) = (Vec::with_capacity(users), Vec::with_capacity(users));
        for _ in 0..users {
            let (n, l) = next("user line")?;
            let (u, seq) = l.split_once('\t').ok_or_else(|| perr(n, "missing tab".into()))?;
            let seq = seq
                .split_ascii_whitespace()
                .map(|t| t.parse::<usize>().map_err(|_| perr(n, format!("bad item id {t:?}"))))
                .collect::<Result<Vec<_>>>()?;
            user_ids.push(u.to_string());
            sequences.push(seq);
        }
        if let Some((n, Ok(l))) = lines.next() {
            if !l.trim().is_empty() {
                return Err(perr(n + 1, "trailing content".into()));
            }
        }
        Dataset::new(item_ids, user_ids, sequences)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| MlsaError::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_cache(&mut w)?;
        w.flush().map_err(|e| MlsaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_cache(open(path)?, path)
    }
}

/// Sorts each user's records by time (stable, so ties keep file order),
/// assigns dense ids in order of first appearance, and splits leave-one-out.
pub fn build_split(records: &[InteractionRecord]) -> Result<(Dataset, Split)> {
    let mut per_user: IndexMap<&str, Vec<&InteractionRecord>> = IndexMap::new();
    for r in records {
        per_user.entry(r.user.as_str()).or_default().push(r);
    }
    let mut item_index: IndexMap<&str, usize> = IndexMap::new();
    for r in records {
        let next = item_index.len() + 1;
        item_index.entry(r.item.as_str()).or_insert(next);
    }
    let mut user_ids = Vec::with_capacity(per_user.len());
    let mut sequences = Vec::with_capacity(per_user.len());
    for (user, mut recs) in per_user {
        recs.sort_by_key(|r| r.timestamp);
        user_ids.push(user.to_string());
        sequences.push(recs.iter().map(|r| item_index[r.item.as_str()]).collect());
    }
    let item_ids = item_index.keys().map(|s| s.to_string()).collect();
    let ds = Dataset::new(item_ids, user_ids, sequences)?;
    let split = ds.split()?;
    Ok((ds, split))
}

/// The most recent `len` items, left-padded with the padding id.
pub fn pad_truncate(items: &[usize], len: usize) -> Vec<usize> {
    let tail = &items[items.len().saturating_sub(len)..];
    let mut out = vec![PADDING_ID; len - tail.len()];
    out.extend_from_slice(tail);
    out
}

pub fn dataset_stats(ds: &Dataset) -> DatasetStats {
    let interactions: usize = ds.sequences.iter().map(Vec::len).sum();
    let users = ds.num_users();
    let items = {
        let mut seen = vec![false; ds.vocab_size()];
        ds.sequences.iter().flatten().for_each(|&i| seen[i] = true);
        seen.iter().filter(|&&s| s).count()
    };
    DatasetStats {
        users,
        items,
        interactions,
        avg_length: if users == 0 { 0.0 } else { interactions as f64 / users as f64 },
    }
}

/// Parse, filter and split a raw log.
pub fn prepare(kind: DatasetKind, path: &Path, k: usize, mode: FilterMode) -> Result<(Dataset, Split)> {
    let raw = parse(kind, path)?;
    let filtered = kcore_filter_with(&raw, k, mode)?;
    if mode == FilterMode::Fixpoint && !satisfies_kcore(&filtered, k) {
        return Err(MlsaError::Data(format!("{k}-core constraints violated after filtering")));
    }
    if filtered.is_empty() {
        return Err(MlsaError::Data(format!("no interactions left after {k}-core filtering")));
    }
    log::info!("{}: {} raw records, {} after {k}-core ({mode})", path.display(), raw.len(), filtered.len());
    build_split(&filtered)
}

/// Resolves a dataset path against `MLSA_DATA_DIR` when it is relative and
/// not found as given.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(root) = std::env::var_os("MLSA_DATA_DIR") {
            return Path::new(&root).join(path);
        }
    }
    path.to_path_buf()
}

/// Users walking a ring of `items` items: each sequence starts at a random
/// item and item `i` is always followed by `i + 1 mod items`.
pub fn synthetic_successor(items: usize, users: usize, len: usize, seed: u64) -> Result<Dataset> {
    if items == 0 || users == 0 || len < 3 {
        return Err(MlsaError::config("synthetic data needs items, users >= 1 and length >= 3"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sequences = (0..users)
        .map(|_| {
            let start = rng.random_range(0..items);
            (0..len).map(|t| (start + t) % items + 1).collect()
        })
        .collect();
    Dataset::new((0..items).map(|i| i.to_string()).collect(), (0..users).map(|u| format!("u{u}")).collect(), sequences)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn rec(u: &str, i: &str, t: u64) -> InteractionRecord {
        InteractionRecord { user: u.into(), item: i.into(), rating: 1.0, timestamp: t }
    }

    fn origin() -> &'static Path {
        Path::new("test.dat")
    }

    #[test]
    fn movielens_lines() {
        let r = parse_movielens_reader("1::1193::5::978300760\n".as_bytes(), origin()).unwrap();
        assert_eq!(
            r,
            vec![InteractionRecord { user: "1".into(), item: "1193".into(), rating: 5.0, timestamp: 978300760 }]
        );
        assert!(parse_movielens_reader("".as_bytes(), origin()).unwrap().is_empty());
        let e = parse_movielens_reader("1::2::3::4\n1::2::3\n".as_bytes(), origin()).unwrap_err();
        assert!(matches!(e, MlsaError::Parse { line: 2, .. }), "{e}");
    }

    #[test]
    fn amazon_lines() {
        let r = parse_amazon_reader("A1B2,0205616461,5.0,1369699200\r\n".as_bytes(), origin()).unwrap();
        assert_eq!(r[0].user, "A1B2");
        assert_eq!(r[0].item, "0205616461");
        assert_eq!(r[0].timestamp, 1369699200);
        assert!(parse_amazon_reader("".as_bytes(), origin()).unwrap().is_empty());
        let e = parse_amazon_reader("a,b,5.0,oops\n".as_bytes(), origin()).unwrap_err();
        assert!(matches!(e, MlsaError::Parse { line: 1, .. }));
        assert!(parse_amazon_reader("a,b,5.0\n".as_bytes(), origin()).is_err());
    }

    fn complete(users: usize, items: usize) -> Vec<InteractionRecord> {
        (0..users).flat_map(|u| (0..items).map(move |i| rec(&format!("u{u}"), &format!("i{i}"), i as u64))).collect()
    }

    #[test]
    fn kcore_examples() {
        let all = complete(5, 5);
        assert_eq!(kcore_filter(&all, 5).unwrap(), all);
        let few: Vec<_> = (0..3).map(|i| rec("u", &format!("i{i}"), 0)).collect();
        assert!(kcore_filter(&few, 5).unwrap().is_empty());
        assert!(kcore_filter(&few, 0).is_err());
    }

    /// Removes one offending user or item at a time until none is left.
    fn brute_force(records: &[InteractionRecord], k: usize) -> Vec<InteractionRecord> {
        let mut cur = records.to_vec();
        loop {
            let (users, items) = degrees(cur.iter());
            let bad_user = users.iter().filter(|(_, &d)| d < k).map(|(u, _)| u.to_string()).min();
            let bad_item = items.iter().filter(|(_, &d)| d < k).map(|(i, _)| i.to_string()).min();
            let before = cur.len();
            if let Some(u) = bad_user {
                cur.retain(|r| r.user != u);
            } else if let Some(i) = bad_item {
                cur.retain(|r| r.item != i);
            }
            if cur.len() == before {
                return cur;
            }
        }
    }

    #[test]
    fn kcore_cascade_matches_brute_force() {
        // Five users share items a..e; u5 adds a sixth item x with u6, who has only 4 interactions.
        let mut recs = complete(5, 5);
        recs.push(rec("u0", "x", 9));
        for i in ["x", "a", "b", "c"] {
            recs.push(rec("u5", i, 1));
        }
        let fix = kcore_filter(&recs, 5).unwrap();
        assert_eq!(fix, brute_force(&recs, 5));
        assert!(satisfies_kcore(&fix, 5));
        assert!(!fix.iter().any(|r| r.item == "x" || r.user == "u5"));
    }

    proptest! {
        #[test]
        fn kcore_fixpoint_equals_brute_force(edges in prop::collection::vec((0u8..8, 0u8..8), 0..120), k in 1usize..5) {
            let recs: Vec<_> = edges.iter().enumerate().map(|(t, (u, i))| rec(&format!("u{u}"), &format!("i{i}"), t as u64)).collect();
            let fix = kcore_filter(&recs, k).unwrap();
            prop_assert!(satisfies_kcore(&fix, k));
            let mut a = fix.clone();
            let mut b = brute_force(&recs, k);
            a.sort_by(|x, y| (&x.user, &x.item, x.timestamp).cmp(&(&y.user, &y.item, y.timestamp)));
            b.sort_by(|x, y| (&x.user, &x.item, x.timestamp).cmp(&(&y.user, &y.item, y.timestamp)));
            prop_assert_eq!(a, b);
        }

        #[test]
        fn pad_truncate_keeps_last(items in prop::collection::vec(1usize..100, 1..80), len in 1usize..60) {
            let out = pad_truncate(&items, len);
            prop_assert_eq!(out.len(), len);
            prop_assert_eq!(out[len - 1], *items.last().unwrap());
        }
    }

    #[test]
    fn one_pass_can_leave_violations() {
        let mut recs = complete(5, 5);
        recs.push(rec("u0", "x", 9));
        for i in ["x", "a", "b", "c"] {
            recs.push(rec("u5", i, 1));
        }
        recs.extend((0..4).map(|u| rec(&format!("u{u}"), "x", 10)));
        // x has 6 interactions before u5 goes, 5 after, so one pass and the fixpoint agree here.
        assert_eq!(kcore_filter_with(&recs, 5, FilterMode::OnePass).unwrap(), kcore_filter(&recs, 5).unwrap());
        let mut recs = complete(5, 5);
        recs.push(rec("u0", "y", 1));
        recs.extend((0..4).map(|j| rec("u5", if j == 0 { "y" } else { "a" }, 2)));
        recs.extend((1..4).map(|u| rec(&format!("u{u}"), "y", 3)));
        // y reaches 5 only with u5, who is dropped.
        let once = kcore_filter_with(&recs, 5, FilterMode::OnePass).unwrap();
        assert!(!satisfies_kcore(&once, 5));
        assert!(satisfies_kcore(&kcore_filter(&recs, 5).unwrap(), 5));
    }

    #[test]
    fn split_examples() {
        let recs: Vec<_> =
            ["a", "b", "c", "d", "e"].iter().enumerate().map(|(t, i)| rec("u", i, 10 - t as u64)).rev().collect();
        let (ds, split) = build_split(&recs).unwrap();
        let name = |i: usize| ds.item_id(i).unwrap().to_string();
        let s = &split.users[0];
        assert_eq!(s.train.iter().map(|&i| name(i)).collect::<Vec<_>>(), ["e", "d", "c"]);
        assert_eq!((name(s.valid), name(s.test)), ("b".into(), "a".into()));

        let ties = vec![rec("u", "p", 5), rec("u", "q", 5), rec("u", "r", 1), rec("u", "s", 5)];
        let (ds, _) = build_split(&ties).unwrap();
        let order: Vec<&str> = ds.sequences()[0].iter().map(|&i| ds.item_id(i).unwrap()).collect();
        assert_eq!(order, ["r", "p", "q", "s"]);

        assert!(matches!(build_split(&[rec("u", "a", 0), rec("u", "b", 1)]), Err(MlsaError::Split(_))));
    }

    #[test]
    fn pad_truncate_examples() {
        assert_eq!(pad_truncate(&[7], 4), [0, 0, 0, 7]);
        let sixty: Vec<usize> = (1..=60).collect();
        assert_eq!(pad_truncate(&sixty, 50), (11..=60).collect::<Vec<_>>());
        assert_eq!(pad_truncate(&[3, 4, 5], 3), [3, 4, 5]);
        assert_eq!(pad_truncate(&[], 2), [0, 0]);
    }

    #[test]
    fn stats_examples() {
        let recs: Vec<_> = (0..5).map(|i| rec("u", &format!("i{i}"), i)).collect();
        let (ds, _) = build_split(&recs).unwrap();
        let s = dataset_stats(&ds);
        assert_eq!((s.users, s.items, s.interactions, s.avg_length), (1, 5, 5, 5.0));
        let empty = Dataset::new(vec![], vec![], vec![]).unwrap();
        assert_eq!(dataset_stats(&empty), DatasetStats { users: 0, items: 0, interactions: 0, avg_length: 0.0 });
        let shown = DatasetStats { users: 6040, items: 3416, interactions: 999611, avg_length: 165.4 }.to_string();
        assert_eq!(shown, "6040 users, 3416 items, 999611 interactions, avg 165.4");
    }

    #[test]
    fn cache_round_trip_and_determinism() {
        let text = "3::b::1::5\n1::a::1::3\n3::a::1::2\n1::c::1::1\n3::c::1::9\n1::b::1::4\n";
        let build = || {
            let recs = parse_movielens_reader(text.as_bytes(), origin()).unwrap();
            build_split(&recs).unwrap()
        };
        let ((a, sa), (b, sb)) = (build(), build());
        assert_eq!((&a, &sa), (&b, &sb));
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.write_cache(&mut x).unwrap();
        b.write_cache(&mut y).unwrap();
        assert_eq!(x, y);
        let back = Dataset::read_cache(x.as_slice(), origin()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.split().unwrap(), sa);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.txt");
        a.save(&p).unwrap();
        assert_eq!(Dataset::load(&p).unwrap(), a);
    }

    #[test]
    fn cache_rejects_corruption() {
        let ds = synthetic_successor(5, 3, 4, 0).unwrap();
        let mut buf = Vec::new();
        ds.write_cache(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(Dataset::read_cache(text.replace("MLSA-DATASET 1", "MLSA-DATASET 2").as_bytes(), origin()).is_err());
        assert!(Dataset::read_cache(text.replace("u1\t", "u1 ").as_bytes(), origin()).is_err());
        assert!(Dataset::read_cache(text.replace("u0\t", "u0\t9 ").as_bytes(), origin()).is_err());
        let cut = &text[..text.len() - 10];
        assert!(Dataset::read_cache(cut.as_bytes(), origin()).is_err());
    }

    #[test]
    fn successor_rule_holds() {
        let ds = synthetic_successor(500, 50, 20, 3).unwrap();
        assert_eq!(ds.vocab_size(), 501);
        for s in ds.sequences() {
            assert_eq!(s.len(), 20);
            for w in s.windows(2) {
                assert_eq!(w[1], w[0] % 500 + 1);
            }
        }
    }
}
