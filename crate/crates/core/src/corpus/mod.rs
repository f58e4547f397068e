//! Interaction logs, 5-core filtering, vocabularies and leave-one-out splits.

mod batch;
mod synthetic;

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub use batch::{
    context_batch, make_pretrain_batch, masked_batch_with, next_batch, permuted_batch_with, AttentionMode, BatchSpec,
    InputBatch, Task, TrainingBatch,
};
pub use synthetic::{generate_synthetic, SyntheticData, SyntheticSpec};

/// Minimum number of events every user and item keeps after filtering.
pub const CORE: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

/// Events grouped by user, each user's events ordered by timestamp with ties
/// kept in input order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InteractionLog {
    events: Vec<Event>,
    /// Items that survive filtering regardless of their own count.
    pub exempt_items: BTreeSet<String>,
}

impl InteractionLog {
    pub fn new(mut events: Vec<Event>) -> Self {
        // stable: ties keep input order
        events.sort_by(|a, b| a.user.cmp(&b.user).then(a.timestamp.cmp(&b.timestamp)));
        InteractionLog { events, exempt_items: BTreeSet::new() }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Per-user item sequences in chronological order.
    pub fn user_sequences(&self) -> Vec<(&str, Vec<&str>)> {
        let mut out: Vec<(&str, Vec<&str>)> = Vec::new();
        for e in &self.events {
            match out.last_mut() {
                Some((u, items)) if *u == e.user => items.push(&e.item),
                _ => out.push((&e.user, vec![&e.item])),
            }
        }
        out
    }

    pub fn item_counts(&self) -> HashMap<&str, usize> {
        let mut counts = HashMap::new();
        for e in &self.events {
            *counts.entry(e.item.as_str()).or_insert(0) += 1;
        }
        counts
    }

    pub fn user_counts(&self) -> HashMap<&str, usize> {
        let mut counts = HashMap::new();
        for e in &self.events {
            *counts.entry(e.user.as_str()).or_insert(0) += 1;
        }
        counts
    }
}

/// Reads `user<TAB>item<TAB>timestamp` lines. Blank lines are skipped.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<InteractionLog> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse_err = |message: String| Error::Parse { line: lineno, message };
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(parse_err("empty user or item token".into()));
        }
        let timestamp = fields[2]
            .trim()
            .parse::<i64>()
            .map_err(|_| parse_err(format!("timestamp {:?} is not an integer", fields[2])))?;
        events.push(Event { user: fields[0].to_string(), item: fields[1].to_string(), timestamp });
    }
    Ok(InteractionLog::new(events))
}

pub fn write_interactions(log: &InteractionLog, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for e in log.events() {
        writeln!(w, "{}\t{}\t{}", e.user, e.item, e.timestamp)?;
    }
    w.flush()?;
    Ok(())
}

/// Maximal subset in which every user and every non-exempt item has at least
/// [`CORE`] events, found by repeated removal until nothing changes.
pub fn five_core_filter(log: &InteractionLog) -> InteractionLog {
    k_core_filter(log, CORE)
}

pub fn k_core_filter(log: &InteractionLog, k: usize) -> InteractionLog {
    let events = log.events();
    let mut user_id: HashMap<&str, usize> = HashMap::new();
    let mut item_id: HashMap<&str, usize> = HashMap::new();
    let mut ev_user = Vec::with_capacity(events.len());
    let mut ev_item = Vec::with_capacity(events.len());
    for e in events {
        let n = user_id.len();
        ev_user.push(*user_id.entry(&e.user).or_insert(n));
        let n = item_id.len();
        ev_item.push(*item_id.entry(&e.item).or_insert(n));
    }
    let mut exempt = vec![false; item_id.len()];
    for (tok, &i) in &item_id {
        exempt[i] = log.exempt_items.contains(*tok);
    }
    let mut user_events = vec![Vec::new(); user_id.len()];
    let mut item_events = vec![Vec::new(); item_id.len()];
    for (idx, (&u, &i)) in ev_user.iter().zip(&ev_item).enumerate() {
        user_events[u].push(idx);
        item_events[i].push(idx);
    }
    let mut user_count: Vec<usize> = user_events.iter().map(Vec::len).collect();
    let mut item_count: Vec<usize> = item_events.iter().map(Vec::len).collect();
    let mut alive = vec![true; events.len()];
    let mut user_dead = vec![false; user_count.len()];
    let mut item_dead = vec![false; item_count.len()];

    // Work queue of (is_user, id) nodes whose count may have dropped below k.
    let mut queue: Vec<(bool, usize)> = (0..user_count.len()).map(|u| (true, u)).collect();
    queue.extend((0..item_count.len()).map(|i| (false, i)));
    while let Some((is_user, id)) = queue.pop() {
        let (dead, below) = if is_user {
            (user_dead[id], user_count[id] < k)
        } else {
            (item_dead[id], item_count[id] < k && !exempt[id])
        };
        if dead || !below {
            continue;
        }
        let incident = if is_user {
            user_dead[id] = true;
            &user_events[id]
        } else {
            item_dead[id] = true;
            &item_events[id]
        };
        for &ev in incident {
            if !alive[ev] {
                continue;
            }
            alive[ev] = false;
            let (u, i) = (ev_user[ev], ev_item[ev]);
            user_count[u] -= 1;
            item_count[i] -= 1;
            if is_user {
                queue.push((false, i));
            } else {
                queue.push((true, u));
            }
        }
    }
    let kept: Vec<Event> = events.iter().zip(&alive).filter(|(_, &a)| a).map(|(e, _)| e.clone()).collect();
    InteractionLog { events: kept, exempt_items: log.exempt_items.clone() }
}

/// Dense token ↔ index mapping in lexicographic token order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = tokens.into_iter().map(Into::into).collect();
        let tokens: Vec<String> = set.into_iter().collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// A user's full chronological sequence; the last item is the test target and
/// the one before it the validation target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub user: usize,
    items: Vec<usize>,
}

impl UserSequence {
    /// Needs at least three items.
    pub fn new(user: usize, items: Vec<usize>) -> Option<Self> {
        (items.len() >= 3).then_some(UserSequence { user, items })
    }

    pub fn full(&self) -> &[usize] {
        &self.items
    }

    pub fn train(&self) -> &[usize] {
        &self.items[..self.items.len() - 2]
    }

    pub fn valid(&self) -> usize {
        self.items[self.items.len() - 2]
    }

    pub fn test(&self) -> usize {
        self.items[self.items.len() - 1]
    }

    /// Everything before the test target.
    pub fn history(&self) -> &[usize] {
        &self.items[..self.items.len() - 1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Valid,
    Test,
}

/// One ranking case: the context the model sees, the held-out target, and
/// the user's other items which are removed from the candidate set.
#[derive(Clone, Debug)]
pub struct EvalCase<'a> {
    pub context: &'a [usize],
    pub target: usize,
    pub exclude: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceDataset {
    pub items: Vocab,
    pub users: Vocab,
    pub sequences: Vec<UserSequence>,
    pub max_len: usize,
    /// Users dropped for having fewer than three events.
    pub excluded_users: usize,
}

fn recent(s: &[usize], max_len: usize) -> &[usize] {
    &s[s.len().saturating_sub(max_len)..]
}

impl SequenceDataset {
    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Context and exclusions for ranking one user's held-out item.
    ///
    /// The validation context is the train prefix; the test context adds the
    /// validation item. Both keep only the most recent `max_len` items.
    pub fn eval_case(&self, user: usize, split: Split) -> EvalCase<'_> {
        let s = &self.sequences[user];
        let (history, target) = match split {
            Split::Valid => (s.train(), s.valid()),
            Split::Test => (s.history(), s.test()),
        };
        let mut exclude: Vec<usize> = history.iter().copied().filter(|&i| i != target).collect();
        exclude.sort_unstable();
        exclude.dedup();
        EvalCase { context: recent(history, self.max_len), target, exclude }
    }

    /// Interaction counts over training prefixes only.
    pub fn train_popularity(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_items()];
        for s in &self.sequences {
            for &i in s.train() {
                counts[i] += 1;
            }
        }
        counts
    }

    /// Writes `items.txt`, `users.txt` and `sequences.tsv` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(fs::File::create(dir.join("items.txt"))?);
        for t in self.items.tokens() {
            writeln!(w, "{t}")?;
        }
        w.flush()?;
        let mut w = BufWriter::new(fs::File::create(dir.join("users.txt"))?);
        for t in self.users.tokens() {
            writeln!(w, "{t}")?;
        }
        w.flush()?;
        let mut w = BufWriter::new(fs::File::create(dir.join("sequences.tsv"))?);
        for s in &self.sequences {
            let items: Vec<String> = s.full().iter().map(usize::to_string).collect();
            writeln!(w, "{}\t{}", self.users.token(s.user), items.join(" "))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, max_len: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let read_lines = |name: &str| -> Result<Vec<String>> {
            let text = fs::read_to_string(dir.join(name))?;
            Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
        };
        let items = Vocab::from_tokens(read_lines("items.txt")?);
        let users = Vocab::from_tokens(read_lines("users.txt")?);
        let mut sequences = Vec::new();
        for (i, line) in read_lines("sequences.tsv")?.iter().enumerate() {
            let bad = |message: String| Error::Parse { line: i + 1, message };
            let (user, rest) = line.split_once('\t').ok_or_else(|| bad("missing tab".into()))?;
            let user = users.get(user).ok_or_else(|| bad(format!("unknown user {user:?}")))?;
            let seq = rest
                .split(' ')
                .map(|t| match t.parse::<usize>() {
                    Ok(v) if v < items.len() => Ok(v),
                    _ => Err(bad(format!("bad item index {t:?}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            sequences.push(UserSequence::new(user, seq).ok_or_else(|| bad("fewer than 3 items".into()))?);
        }
        Ok(SequenceDataset { items, users, sequences, max_len, excluded_users: 0 })
    }
}

/// Leave-one-out split: per user, the last item is the test target, the
/// second-to-last the validation target and the rest the training prefix.
pub fn leave_one_out_split(log: &InteractionLog, max_len: usize) -> Result<SequenceDataset> {
    if max_len == 0 {
        return Err(Error::Argument("max_len must be positive".into()));
    }
    let per_user = log.user_sequences();
    let items = Vocab::from_tokens(log.events().iter().map(|e| e.item.as_str()));
    let kept: Vec<_> = per_user.iter().filter(|(_, s)| s.len() >= 3).collect();
    let excluded_users = per_user.len() - kept.len();
    if excluded_users > 0 {
        log::warn!("{excluded_users} users with fewer than 3 events left out of the split");
    }
    let users = Vocab::from_tokens(kept.iter().map(|(u, _)| *u));
    let mut sequences: Vec<UserSequence> = kept
        .iter()
        .map(|(u, s)| {
            let seq = s.iter().map(|t| items.get(t).expect("item in vocab")).collect();
            UserSequence::new(users.get(u).expect("user in vocab"), seq).expect("length checked")
        })
        .collect();
    sequences.sort_by_key(|s| s.user);
    Ok(SequenceDataset { items, users, sequences, max_len, excluded_users })
}
