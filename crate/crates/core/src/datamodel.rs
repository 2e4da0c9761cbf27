//! Event logs, user sequences, the catalog, and leakage-free dataset splits.
//!
//! Logs are stored as dense indices into a [`Catalog`]; the textual ids only
//! matter at the TSV boundary. Index order equals lexicographic id order, so
//! "ties broken by item id" and "ties broken by index" mean the same thing.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Identifier reserved for the padding token.
pub const PAD_ID: &str = "<pad>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
}

impl Catalog {
    /// Builds a catalog from id lists. Ids are deduplicated and sorted.
    pub fn new<U, I>(users: U, items: I) -> Result<Self>
    where
        U: IntoIterator,
        U::Item: Into<String>,
        I: IntoIterator,
        I::Item: Into<String>,
    {
        let user_ids: Vec<String> = users
            .into_iter()
            .map(Into::into)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let item_ids: Vec<String> = items
            .into_iter()
            .map(Into::into)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if item_ids.iter().any(|id| id == PAD_ID) {
            return Err(Error::Config(format!("item id {PAD_ID} is reserved")));
        }
        let user_index = user_ids.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        let item_index = item_ids.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        Ok(Self { user_ids, item_ids, user_index, item_index })
    }

    pub fn empty() -> Self {
        Self::new(Vec::<String>::new(), Vec::<String>::new()).expect("empty catalog is valid")
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    /// Index of the padding token; one past the last real item.
    pub fn pad(&self) -> usize {
        self.item_ids.len()
    }

    pub fn user_id(&self, idx: usize) -> &str {
        &self.user_ids[idx]
    }

    pub fn item_id(&self, idx: usize) -> &str {
        &self.item_ids[idx]
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.user_index.get(id).copied()
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.item_index.get(id).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    Exposure,
    Click,
}

impl EventKind {
    fn as_str(self) -> &'static str {
        match self {
            EventKind::Exposure => "exposure",
            EventKind::Click => "click",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub user: usize,
    pub item: usize,
    pub timestamp: u64,
    pub kind: EventKind,
}

/// Events grouped per user, each group sorted by timestamp with exposures
/// ordered before clicks at equal timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct EventLog {
    catalog: Catalog,
    per_user: Vec<Vec<Event>>,
}

impl EventLog {
    /// Groups and validates indexed events against `catalog`.
    pub fn from_events(catalog: Catalog, events: impl IntoIterator<Item = Event>) -> Result<Self> {
        let mut per_user = vec![Vec::new(); catalog.n_users()];
        for ev in events {
            if ev.user >= catalog.n_users() {
                return Err(Error::Integrity(format!("user index {} not in catalog", ev.user)));
            }
            if ev.item >= catalog.n_items() {
                return Err(Error::UnknownItem(ev.item));
            }
            per_user[ev.user].push(ev);
        }
        for events in &mut per_user {
            events.sort_by_key(|e| (e.timestamp, e.kind));
            let mut exposed = HashSet::new();
            for e in events.iter() {
                match e.kind {
                    EventKind::Exposure => {
                        exposed.insert(e.item);
                    }
                    EventKind::Click if !exposed.contains(&e.item) => {
                        return Err(Error::Integrity(format!(
                            "click on {} by {} at t={} without prior exposure",
                            catalog.item_id(e.item),
                            catalog.user_id(e.user),
                            e.timestamp
                        )));
                    }
                    EventKind::Click => {}
                }
            }
        }
        Ok(Self { catalog, per_user })
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn n_users(&self) -> usize {
        self.per_user.len()
    }

    pub fn events(&self, user: usize) -> &[Event] {
        &self.per_user[user]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Event> {
        self.per_user.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.per_user.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The user's clicks in chronological order.
    pub fn interaction_seq(&self, user: usize) -> Vec<usize> {
        self.per_user[user]
            .iter()
            .filter(|e| e.kind == EventKind::Click)
            .map(|e| e.item)
            .collect()
    }

    /// The user's clicks with their timestamps.
    pub fn timed_clicks(&self, user: usize) -> Vec<(u64, usize)> {
        self.per_user[user]
            .iter()
            .filter(|e| e.kind == EventKind::Click)
            .map(|e| (e.timestamp, e.item))
            .collect()
    }

    /// The user's exposures in chronological order.
    pub fn exposure_seq(&self, user: usize) -> Vec<usize> {
        self.per_user[user]
            .iter()
            .filter(|e| e.kind == EventKind::Exposure)
            .map(|e| e.item)
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in self.iter() {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                self.catalog.user_id(e.user),
                self.catalog.item_id(e.item),
                e.timestamp,
                e.kind.as_str()
            );
        }
        out
    }
}

/// Parses the `user<TAB>item<TAB>timestamp<TAB>kind` format. Lines starting
/// with `#` and blank lines are skipped.
pub fn parse_event_log<R: BufRead>(reader: R) -> Result<EventLog> {
    struct Raw {
        user: String,
        item: String,
        timestamp: u64,
        kind: EventKind,
    }
    let mut raw = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 4 tab-separated columns, found {}", cols.len()),
            });
        }
        let timestamp = cols[2].parse::<u64>().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("timestamp {:?} is not a non-negative integer", cols[2]),
        })?;
        let kind = match cols[3] {
            "exposure" => EventKind::Exposure,
            "click" => EventKind::Click,
            other => {
                return Err(Error::Parse { line: line_no, message: format!("unknown kind {other:?}") })
            }
        };
        if cols[0].is_empty() || cols[1].is_empty() {
            return Err(Error::Parse { line: line_no, message: "empty identifier".into() });
        }
        if cols[1] == PAD_ID {
            return Err(Error::Parse { line: line_no, message: format!("item id {PAD_ID} is reserved") });
        }
        raw.push(Raw { user: cols[0].to_string(), item: cols[1].to_string(), timestamp, kind });
    }
    let catalog = Catalog::new(
        raw.iter().map(|r| r.user.clone()),
        raw.iter().map(|r| r.item.clone()),
    )?;
    let events: Vec<Event> = raw
        .iter()
        .map(|r| Event {
            user: catalog.user_index(&r.user).expect("user collected above"),
            item: catalog.item_index(&r.item).expect("item collected above"),
            timestamp: r.timestamp,
            kind: r.kind,
        })
        .collect();
    EventLog::from_events(catalog, events)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles users by `seed` and partitions them. Validation and test sizes are
/// `floor(ratio * n)`; the remainder goes to training.
pub fn split_by_user(n_users: usize, ratios: (f64, f64, f64), seed: u64) -> Result<UserSplit> {
    let (tr, va, te) = ratios;
    if !(tr > 0.0 && va > 0.0 && te > 0.0) || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be positive and sum to 1")));
    }
    let n_valid = (va * n_users as f64 + 1e-9).floor() as usize;
    let n_test = (te * n_users as f64 + 1e-9).floor() as usize;
    if n_users < 3 || n_valid == 0 || n_test == 0 || n_valid + n_test >= n_users {
        return Err(Error::Config(format!(
            "{n_users} users cannot fill train/valid/test with ratios {ratios:?}"
        )));
    }
    let mut users: Vec<usize> = (0..n_users).collect();
    users.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut valid = users[..n_valid].to_vec();
    let mut test = users[n_valid..n_valid + n_test].to_vec();
    let mut train = users[n_valid + n_test..].to_vec();
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();
    Ok(UserSplit { train, valid, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartRole {
    Simulator,
    Evaluation,
}

/// One side of the chronological exposure split: per-user exposure events.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposurePart {
    pub role: PartRole,
    per_user: Vec<Vec<Event>>,
}

impl ExposurePart {
    pub fn new(role: PartRole, per_user: Vec<Vec<Event>>) -> Self {
        Self { role, per_user }
    }

    pub fn events(&self, user: usize) -> &[Event] {
        &self.per_user[user]
    }

    pub fn n_users(&self) -> usize {
        self.per_user.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Event> {
        self.per_user.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.per_user.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Exposure item sequences of `users` restricted to this part.
    pub fn sequences(&self, users: &[usize]) -> Vec<TaggedSequence> {
        users
            .iter()
            .filter(|&&u| !self.per_user[u].is_empty())
            .map(|&u| TaggedSequence { user: u, events: self.per_user[u].clone() })
            .collect()
    }
}

/// An exposure sequence that remembers which events it came from, so
/// consumers can prove it does not overlap a held-out part.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedSequence {
    pub user: usize,
    pub events: Vec<Event>,
}

impl TaggedSequence {
    pub fn items(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.item).collect()
    }
}

/// Per user, the earliest `ceil(fraction * n)` exposures go to the simulator
/// part and the rest to the evaluation part.
pub fn split_exposure(log: &EventLog, fraction: f64) -> Result<(ExposurePart, ExposurePart)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("exposure fraction {fraction} must lie in (0, 1)")));
    }
    let mut sim = Vec::with_capacity(log.n_users());
    let mut eval = Vec::with_capacity(log.n_users());
    for u in 0..log.n_users() {
        let exposures: Vec<Event> =
            log.events(u).iter().filter(|e| e.kind == EventKind::Exposure).copied().collect();
        let cut = ((fraction * exposures.len() as f64) - 1e-9).ceil().max(0.0) as usize;
        let cut = cut.min(exposures.len());
        eval.push(exposures[cut..].to_vec());
        sim.push(exposures[..cut].to_vec());
    }
    Ok((ExposurePart::new(PartRole::Simulator, sim), ExposurePart::new(PartRole::Evaluation, eval)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub users: UserSplit,
    pub expo_sim_part: ExposurePart,
    pub eval_sim_part: ExposurePart,
}

impl DatasetSplit {
    pub fn new(log: &EventLog, ratios: (f64, f64, f64), seed: u64, expo_fraction: f64) -> Result<Self> {
        let users = split_by_user(log.n_users(), ratios, seed)?;
        let (expo_sim_part, eval_sim_part) = split_exposure(log, expo_fraction)?;
        Ok(Self { users, expo_sim_part, eval_sim_part })
    }
}

/// Keeps the most recent `max_len` items and left-pads with `pad`.
pub fn truncate_pad(seq: &[usize], max_len: usize, pad: usize) -> Vec<usize> {
    assert!(max_len >= 1, "max_len must be at least 1");
    let start = seq.len().saturating_sub(max_len);
    let kept = &seq[start..];
    let mut out = vec![pad; max_len - kept.len()];
    out.extend_from_slice(kept);
    out
}
