//! Interaction-log ingestion, preprocessing, and temporal splitting.
//!
//! The pipeline is dedup → purchase-count filtering → temporal split, each
//! step a pure function over owned event lists. Identical inputs always
//! produce a byte-identical serialized dataset.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// One raw interaction record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawEvent {
    pub user: String,
    pub item: String,
    pub behavior: String,
    pub timestamp: i64,
}

/// Header-driven column mapping for delimited input files.
#[derive(Clone, Debug)]
pub struct ColumnMap {
    pub user: String,
    pub item: String,
    pub behavior: String,
    pub timestamp: String,
    pub delimiter: char,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            user: "user".into(),
            item: "item".into(),
            behavior: "behavior".into(),
            timestamp: "timestamp".into(),
            delimiter: '\t',
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Processed dataset: dense indices, per-behavior per-split edge lists.
///
/// Every user/item index appears in at least one train edge; val/test events
/// whose user or item has no train presence are removed before reindexing.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_users: usize,
    pub num_items: usize,
    /// Ordered behavior chain; the last entry is the target behavior.
    pub behaviors: Vec<String>,
    /// Edge lists indexed by behavior position, sorted by (user, item).
    pub train: Vec<Vec<(u32, u32)>>,
    pub val: Vec<Vec<(u32, u32)>>,
    pub test: Vec<Vec<(u32, u32)>>,
    /// Dense index → original id.
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

impl Dataset {
    pub fn edges(&self, behavior: usize, split: Split) -> &[(u32, u32)] {
        match split {
            Split::Train => &self.train[behavior],
            Split::Val => &self.val[behavior],
            Split::Test => &self.test[behavior],
        }
    }

    pub fn target_index(&self) -> usize {
        self.behaviors.len() - 1
    }
}

/// Parse a delimited event file. The first line must be a header naming the
/// mapped columns; rows are validated against the configured behavior names.
pub fn load_events(path: &Path, fmt: &ColumnMap, behaviors: &[String]) -> Result<Vec<RawEvent>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let header = match lines.next() {
        Some((_, h)) => h,
        None => return Ok(Vec::new()),
    };
    let cols: Vec<&str> = header.split(fmt.delimiter).map(str::trim).collect();
    let find = |name: &str| -> Result<usize> {
        cols.iter().position(|c| *c == name).ok_or_else(|| Error::MalformedRow {
            line: 1,
            msg: format!("header is missing column '{name}'"),
        })
    };
    let (ui, ii, bi, ti) = (
        find(&fmt.user)?,
        find(&fmt.item)?,
        find(&fmt.behavior)?,
        find(&fmt.timestamp)?,
    );
    let accepted = behaviors.join(", ");
    let known: HashSet<&str> = behaviors.iter().map(String::as_str).collect();

    let mut events = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(fmt.delimiter).collect();
        let need = [ui, ii, bi, ti].into_iter().max().unwrap();
        if fields.len() <= need {
            return Err(Error::MalformedRow {
                line: lineno,
                msg: format!("expected at least {} columns, found {}", need + 1, fields.len()),
            });
        }
        let behavior = fields[bi].trim();
        if !known.contains(behavior) {
            return Err(Error::UnknownBehavior {
                name: behavior.to_string(),
                accepted: accepted.clone(),
            });
        }
        let timestamp: i64 = fields[ti].trim().parse().map_err(|_| Error::MalformedRow {
            line: lineno,
            msg: format!("bad timestamp '{}'", fields[ti].trim()),
        })?;
        if timestamp < 0 {
            return Err(Error::MalformedRow {
                line: lineno,
                msg: format!("negative timestamp {timestamp}"),
            });
        }
        events.push(RawEvent {
            user: fields[ui].trim().to_string(),
            item: fields[ii].trim().to_string(),
            behavior: behavior.to_string(),
            timestamp,
        });
    }
    Ok(events)
}

/// Keep only the earliest event per (user, item, behavior); timestamp ties go
/// to the first occurrence in input order. Relative input order of the kept
/// events is preserved.
pub fn dedup_earliest(events: Vec<RawEvent>) -> Vec<RawEvent> {
    let mut best: HashMap<(String, String, String), usize> = HashMap::new();
    for (idx, ev) in events.iter().enumerate() {
        let key = (ev.user.clone(), ev.item.clone(), ev.behavior.clone());
        match best.get(&key) {
            Some(&prev) if events[prev].timestamp <= ev.timestamp => {}
            _ => {
                best.insert(key, idx);
            }
        }
    }
    let keep: HashSet<usize> = best.into_values().collect();
    events
        .into_iter()
        .enumerate()
        .filter_map(|(i, ev)| keep.contains(&i).then_some(ev))
        .collect()
}

/// Iteratively remove items with fewer than `item_min` target-behavior events,
/// then users with fewer than `user_min`, recounting after each pass, until a
/// fixed point. All behaviors of a removed entity are dropped.
pub fn filter_by_purchase_counts(
    events: Vec<RawEvent>,
    target: &str,
    item_min: usize,
    user_min: usize,
) -> Result<Vec<RawEvent>> {
    let mut events = events;
    loop {
        let mut changed = false;

        if item_min > 0 {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for ev in events.iter().filter(|e| e.behavior == target) {
                *counts.entry(ev.item.as_str()).or_default() += 1;
            }
            let dropped: HashSet<String> = events
                .iter()
                .map(|e| e.item.as_str())
                .filter(|it| counts.get(it).copied().unwrap_or(0) < item_min)
                .map(str::to_string)
                .collect();
            if !dropped.is_empty() {
                events.retain(|e| !dropped.contains(&e.item));
                changed = true;
            }
        }

        if user_min > 0 {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for ev in events.iter().filter(|e| e.behavior == target) {
                *counts.entry(ev.user.as_str()).or_default() += 1;
            }
            let dropped: HashSet<String> = events
                .iter()
                .map(|e| e.user.as_str())
                .filter(|u| counts.get(u).copied().unwrap_or(0) < user_min)
                .map(str::to_string)
                .collect();
            if !dropped.is_empty() {
                events.retain(|e| !dropped.contains(&e.user));
                changed = true;
            }
        }

        if !changed {
            break;
        }
    }
    if events.is_empty() {
        return Err(Error::FiltersRemovedAll);
    }
    Ok(events)
}

/// Split on the pooled global timeline, drop val/test events whose user or
/// item never appears in train, then reindex densely.
///
/// Threshold timestamps sit at the train_frac and train_frac+val_frac
/// positions of the sorted timeline; boundary ties all fall into the earlier
/// split, so the assignment is a function of time only.
pub fn temporal_split(
    events: &[RawEvent],
    behaviors: &[String],
    train_frac: f64,
    val_frac: f64,
) -> Result<Dataset> {
    let fracs_valid =
        train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0;
    if !fracs_valid {
        return Err(Error::Config(format!(
            "split fractions out of range: train {train_frac}, val {val_frac}"
        )));
    }
    if events.is_empty() {
        return Err(Error::NoTrainEdges(
            behaviors.first().cloned().unwrap_or_default(),
        ));
    }

    let mut times: Vec<i64> = events.iter().map(|e| e.timestamp).collect();
    times.sort_unstable();
    let n = times.len();
    let pos1 = ((train_frac * n as f64).floor() as usize).clamp(1, n);
    let t1 = times[pos1 - 1];
    let pos2 = (((train_frac + val_frac) * n as f64).floor() as usize).clamp(pos1, n);
    let t2 = times[pos2 - 1];

    let split_of = |ts: i64| {
        if ts <= t1 {
            Split::Train
        } else if ts <= t2 {
            Split::Val
        } else {
            Split::Test
        }
    };

    let behavior_pos: HashMap<&str, usize> = behaviors
        .iter()
        .enumerate()
        .map(|(i, b)| (b.as_str(), i))
        .collect();

    // Entities that survive are exactly those with a train-split event.
    let mut train_users: BTreeSet<&str> = BTreeSet::new();
    let mut train_items: BTreeSet<&str> = BTreeSet::new();
    for ev in events {
        if split_of(ev.timestamp) == Split::Train {
            train_users.insert(ev.user.as_str());
            train_items.insert(ev.item.as_str());
        }
    }
    let user_index: HashMap<&str, u32> = train_users
        .iter()
        .enumerate()
        .map(|(i, u)| (*u, i as u32))
        .collect();
    let item_index: HashMap<&str, u32> = train_items
        .iter()
        .enumerate()
        .map(|(i, it)| (*it, i as u32))
        .collect();

    let k = behaviors.len();
    let mut train: Vec<BTreeSet<(u32, u32)>> = vec![BTreeSet::new(); k];
    let mut val: Vec<BTreeSet<(u32, u32)>> = vec![BTreeSet::new(); k];
    let mut test: Vec<BTreeSet<(u32, u32)>> = vec![BTreeSet::new(); k];
    for ev in events {
        let b = match behavior_pos.get(ev.behavior.as_str()) {
            Some(&b) => b,
            None => {
                return Err(Error::UnknownBehavior {
                    name: ev.behavior.clone(),
                    accepted: behaviors.join(", "),
                })
            }
        };
        let (u, i) = match (user_index.get(ev.user.as_str()), item_index.get(ev.item.as_str())) {
            (Some(&u), Some(&i)) => (u, i),
            _ => continue, // no train presence; step (v)
        };
        let edge = (u, i);
        match split_of(ev.timestamp) {
            Split::Train => train[b].insert(edge),
            Split::Val => val[b].insert(edge),
            Split::Test => test[b].insert(edge),
        };
    }

    for (b, name) in behaviors.iter().enumerate() {
        if train[b].is_empty() {
            return Err(Error::NoTrainEdges(name.clone()));
        }
    }

    Ok(Dataset {
        num_users: user_index.len(),
        num_items: item_index.len(),
        behaviors: behaviors.to_vec(),
        train: train.into_iter().map(|s| s.into_iter().collect()).collect(),
        val: val.into_iter().map(|s| s.into_iter().collect()).collect(),
        test: test.into_iter().map(|s| s.into_iter().collect()).collect(),
        user_ids: train_users.iter().map(|s| s.to_string()).collect(),
        item_ids: train_items.iter().map(|s| s.to_string()).collect(),
    })
}

/// Full pipeline: parse, dedup, filter, split.
pub fn prepare(
    path: &Path,
    fmt: &ColumnMap,
    behaviors: &[String],
    item_min: usize,
    user_min: usize,
    train_frac: f64,
    val_frac: f64,
) -> Result<Dataset> {
    let events = load_events(path, fmt, behaviors)?;
    let events = dedup_earliest(events);
    let target = behaviors.last().ok_or_else(|| Error::Config("empty behavior chain".into()))?;
    let events = filter_by_purchase_counts(events, target, item_min, user_min)?;
    temporal_split(&events, behaviors, train_frac, val_frac)
}

impl Dataset {
    /// Write the dataset as a directory: `meta`, one edge file per
    /// (behavior, split), and the id-map files. Output is byte-deterministic.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, content: String| -> Result<()> {
            let path = dir.join(name);
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(content.as_bytes()).map_err(|e| Error::io(&path, e))
        };

        let mut meta = String::new();
        meta.push_str(&format!("num_users={}\n", self.num_users));
        meta.push_str(&format!("num_items={}\n", self.num_items));
        meta.push_str(&format!("behaviors={}\n", self.behaviors.join(",")));
        for (b, name) in self.behaviors.iter().enumerate() {
            for split in [Split::Train, Split::Val, Split::Test] {
                meta.push_str(&format!(
                    "edges.{name}.{}={}\n",
                    split.name(),
                    self.edges(b, split).len()
                ));
            }
        }
        write("meta", meta)?;

        let id_map = |ids: &[String]| {
            let mut s = String::new();
            for (idx, id) in ids.iter().enumerate() {
                s.push_str(&format!("{id}\t{idx}\n"));
            }
            s
        };
        write("user_map.tsv", id_map(&self.user_ids))?;
        write("item_map.tsv", id_map(&self.item_ids))?;

        for (b, name) in self.behaviors.iter().enumerate() {
            for split in [Split::Train, Split::Val, Split::Test] {
                let mut s = String::new();
                for &(u, i) in self.edges(b, split) {
                    s.push_str(&format!("{u}\t{i}\n"));
                }
                write(&format!("{name}.{}.edges", split.name()), s)?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let read = |name: &str| -> Result<String> {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
        };
        let meta = read("meta")?;
        let mut kv = BTreeMap::new();
        for line in meta.lines() {
            if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| -> Result<String> {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::Config(format!("dataset meta missing '{k}'")))
        };
        let num_users: usize = get("num_users")?
            .parse()
            .map_err(|_| Error::Config("bad num_users".into()))?;
        let num_items: usize = get("num_items")?
            .parse()
            .map_err(|_| Error::Config("bad num_items".into()))?;
        let behaviors: Vec<String> = get("behaviors")?.split(',').map(str::to_string).collect();

        let parse_ids = |text: &str| -> Vec<String> {
            text.lines()
                .filter_map(|l| l.split_once('\t').map(|(id, _)| id.to_string()))
                .collect()
        };
        let user_ids = parse_ids(&read("user_map.tsv")?);
        let item_ids = parse_ids(&read("item_map.tsv")?);

        let edges =
            |split: Split| -> Result<Vec<Vec<(u32, u32)>>> {
                behaviors
                    .iter()
                    .map(|name| {
                        let text = read(&format!("{name}.{}.edges", split.name()))?;
                        text.lines()
                            .enumerate()
                            .map(|(idx, l)| {
                                let (u, i) = l.split_once('\t').ok_or(Error::MalformedRow {
                                    line: idx + 1,
                                    msg: format!("bad edge line in {name}.{}", split.name()),
                                })?;
                                let parse = |s: &str| {
                                    s.parse::<u32>().map_err(|_| Error::MalformedRow {
                                        line: idx + 1,
                                        msg: format!("bad index '{s}'"),
                                    })
                                };
                                Ok((parse(u)?, parse(i)?))
                            })
                            .collect()
                    })
                    .collect()
            };
        Ok(Dataset {
            num_users,
            num_items,
            behaviors: behaviors.clone(),
            train: edges(Split::Train)?,
            val: edges(Split::Val)?,
            test: edges(Split::Test)?,
            user_ids,
            item_ids,
        })
    }
}
