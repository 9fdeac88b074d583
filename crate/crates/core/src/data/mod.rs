//! Rating storage, ingestion, cross-domain alignment, splitting and synthetic domains.

pub mod ingest;
pub mod matrix;
pub mod split;
pub mod synthetic;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use ingest::{denormalize, ingest_ratings, normalize, IngestedRatings, RatingFormat};
pub use matrix::{Axis, DenseRows, Rating, RatingMatrix};
pub use split::{apply_cold_start, make_split, make_splits, ColdStartViews, SplitPlan};
pub use synthetic::{generate_synthetic, CrossDomainMap, SyntheticSpec, SyntheticTruth};

use crate::error::{Error, Result};

/// Source and target rating matrices aligned on their shared axis: shared
/// index `i` denotes the same entity in both domains.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainPair {
    pub source: RatingMatrix,
    pub target: RatingMatrix,
    pub shared_axis: Axis,
}

impl DomainPair {
    pub fn new(source: RatingMatrix, target: RatingMatrix, shared_axis: Axis) -> Result<Self> {
        let (s, t) = (source.count(shared_axis), target.count(shared_axis));
        if s != t {
            return Err(Error::Data(format!(
                "shared {shared_axis} count differs: source {s}, target {t}"
            )));
        }
        Ok(Self {
            source,
            target,
            shared_axis,
        })
    }

    pub fn shared_count(&self) -> usize {
        self.source.count(self.shared_axis)
    }
}

/// Restricts both domains to their shared entities and re-indexes them.
///
/// `alignment` lists `(source id, target id)` pairs; without it, entities are
/// matched by identical id. On the opposite axis only entities with at least
/// `min_interactions` ratings on the shared entities are kept.
pub fn align_pair(
    source: &IngestedRatings,
    target: &IngestedRatings,
    shared_axis: Axis,
    alignment: Option<&[(String, String)]>,
    min_interactions: usize,
) -> Result<(DomainPair, Vec<(String, String)>)> {
    let ids = |r: &IngestedRatings, axis: Axis| -> Vec<String> {
        match axis {
            Axis::Items => r.item_ids.clone(),
            Axis::Users => r.user_ids.clone(),
        }
    };
    let source_ids = ids(source, shared_axis);
    let target_ids = ids(target, shared_axis);
    let source_pos: HashMap<&str, usize> =
        source_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let target_pos: HashMap<&str, usize> =
        target_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

    let candidates: Vec<(String, String)> = match alignment {
        Some(pairs) => pairs.to_vec(),
        None => source_ids
            .iter()
            .filter(|id| target_pos.contains_key(id.as_str()))
            .map(|id| (id.clone(), id.clone()))
            .collect(),
    };
    let mut shared = Vec::new();
    let mut seen_s = vec![false; source_ids.len()];
    let mut seen_t = vec![false; target_ids.len()];
    for (s, t) in candidates {
        if let (Some(&si), Some(&ti)) = (source_pos.get(s.as_str()), target_pos.get(t.as_str())) {
            if !seen_s[si] && !seen_t[ti] {
                seen_s[si] = true;
                seen_t[ti] = true;
                shared.push((si, ti, s, t));
            }
        }
    }
    if shared.len() < 2 {
        return Err(Error::Data(format!(
            "only {} shared {shared_axis} between the domains",
            shared.len()
        )));
    }

    let restrict = |m: &RatingMatrix, pick: &dyn Fn(&(usize, usize, String, String)) -> usize| {
        let mut new_index = vec![usize::MAX; m.count(shared_axis)];
        for (k, entry) in shared.iter().enumerate() {
            new_index[pick(entry)] = k;
        }
        let other = shared_axis.other();
        let mut counts = vec![0usize; m.count(other)];
        for r in m.entries() {
            let (sh, ot) = match shared_axis {
                Axis::Items => (r.item, r.user),
                Axis::Users => (r.user, r.item),
            };
            if new_index[sh] != usize::MAX {
                counts[ot] += 1;
            }
        }
        let mut other_index = vec![usize::MAX; counts.len()];
        let mut n_other = 0;
        for (o, &c) in counts.iter().enumerate() {
            if c > 0 && c >= min_interactions {
                other_index[o] = n_other;
                n_other += 1;
            }
        }
        let entries: Vec<Rating> = m
            .entries()
            .iter()
            .filter_map(|r| {
                let (sh, ot) = match shared_axis {
                    Axis::Items => (r.item, r.user),
                    Axis::Users => (r.user, r.item),
                };
                let (a, b) = (new_index[sh], other_index[ot]);
                if a == usize::MAX || b == usize::MAX {
                    return None;
                }
                let (item, user) = match shared_axis {
                    Axis::Items => (a, b),
                    Axis::Users => (b, a),
                };
                Some(Rating {
                    item,
                    user,
                    value: r.value,
                })
            })
            .collect();
        let (n_items, n_users) = match shared_axis {
            Axis::Items => (shared.len(), n_other),
            Axis::Users => (n_other, shared.len()),
        };
        RatingMatrix::new(n_items, n_users, entries)
    };
    let source_m = restrict(&source.matrix, &|e| e.0)?;
    let target_m = restrict(&target.matrix, &|e| e.1)?;
    let ids = shared.into_iter().map(|(_, _, s, t)| (s, t)).collect();
    Ok((DomainPair::new(source_m, target_m, shared_axis)?, ids))
}

/// Reads a two-column `source_id<delim>target_id` alignment file.
pub fn read_alignment(path: &Path, delimiter: char) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(delimiter).map(str::trim).collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: format!("expected 2 fields, found {}", fields.len()),
            });
        }
        out.push((fields[0].to_string(), fields[1].to_string()));
    }
    Ok(out)
}

pub const SOURCE_FILE: &str = "source.csv";
pub const TARGET_FILE: &str = "target.csv";
pub const TRUTH_FILE: &str = "truth.json";
pub const PAIR_META_FILE: &str = "pair.json";

/// Metadata of an ingested pair directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub format: String,
    pub shared_axis: Axis,
    pub source_shape: (usize, usize),
    pub target_shape: (usize, usize),
    pub shared_ids: Vec<(String, String)>,
}

const PAIR_FORMAT: &str = "cdrec-pair/1";
const TRUTH_FORMAT: &str = "cdrec-synthetic/1";

#[derive(Serialize, Deserialize)]
struct TruthFile {
    format: String,
    source_shape: (usize, usize),
    target_shape: (usize, usize),
    #[serde(flatten)]
    truth: SyntheticTruth,
}

/// Index-based CSV (`user_id,item_id,rating`), ratings already normalized.
pub fn ratings_csv(m: &RatingMatrix) -> String {
    let mut out = String::from("user_id,item_id,rating\n");
    let mut entries = m.entries().to_vec();
    entries.sort_by_key(|r| (r.user, r.item));
    for r in entries {
        writeln!(out, "{},{},{}", r.user, r.item, r.value).expect("string write");
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_matrices(dir: &Path, pair: &DomainPair) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(SOURCE_FILE), &ratings_csv(&pair.source))?;
    write_file(&dir.join(TARGET_FILE), &ratings_csv(&pair.target))
}

fn shape(m: &RatingMatrix) -> (usize, usize) {
    (m.n_items(), m.n_users())
}

/// Writes `source.csv`, `target.csv` and `truth.json`.
pub fn write_synthetic_dir(dir: &Path, pair: &DomainPair, truth: &SyntheticTruth) -> Result<()> {
    write_matrices(dir, pair)?;
    let file = TruthFile {
        format: TRUTH_FORMAT.into(),
        source_shape: shape(&pair.source),
        target_shape: shape(&pair.target),
        truth: truth.clone(),
    };
    write_file(&dir.join(TRUTH_FILE), &serde_json::to_string_pretty(&file)?)
}

/// Writes `source.csv`, `target.csv` and `pair.json`.
pub fn write_pair_dir(dir: &Path, pair: &DomainPair, shared_ids: &[(String, String)]) -> Result<()> {
    write_matrices(dir, pair)?;
    let meta = PairMeta {
        format: PAIR_FORMAT.into(),
        shared_axis: pair.shared_axis,
        source_shape: shape(&pair.source),
        target_shape: shape(&pair.target),
        shared_ids: shared_ids.to_vec(),
    };
    write_file(&dir.join(PAIR_META_FILE), &serde_json::to_string_pretty(&meta)?)
}

fn read_indexed(path: &Path, (n_items, n_users): (usize, usize)) -> Result<RatingMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, message: String| Error::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("user_id")) {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(err(i + 1, format!("expected 3 fields, found {}", f.len())));
        }
        let user = f[0].parse().map_err(|_| err(i + 1, "bad user index".into()))?;
        let item = f[1].parse().map_err(|_| err(i + 1, "bad item index".into()))?;
        let value = f[2].parse().map_err(|_| err(i + 1, "bad rating".into()))?;
        entries.push(Rating { item, user, value });
    }
    RatingMatrix::new(n_items, n_users, entries)
}

/// Loads a pair directory written by [`write_synthetic_dir`] or [`write_pair_dir`].
pub fn load_pair_dir(dir: &Path) -> Result<(DomainPair, Option<SyntheticTruth>)> {
    let truth_path = dir.join(TRUTH_FILE);
    let meta_path = dir.join(PAIR_META_FILE);
    let (axis, source_shape, target_shape, truth) = if truth_path.exists() {
        let text = fs::read_to_string(&truth_path).map_err(|e| Error::io(&truth_path, e))?;
        let file: TruthFile = serde_json::from_str(&text)?;
        if file.format != TRUTH_FORMAT {
            return Err(Error::Data(format!("unsupported truth format `{}`", file.format)));
        }
        (
            file.truth.spec.shared_axis,
            file.source_shape,
            file.target_shape,
            Some(file.truth),
        )
    } else {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: PairMeta = serde_json::from_str(&text)?;
        if meta.format != PAIR_FORMAT {
            return Err(Error::Data(format!("unsupported pair format `{}`", meta.format)));
        }
        (meta.shared_axis, meta.source_shape, meta.target_shape, None)
    };
    let source = read_indexed(&dir.join(SOURCE_FILE), source_shape)?;
    let target = read_indexed(&dir.join(TARGET_FILE), target_shape)?;
    Ok((DomainPair::new(source, target, axis)?, truth))
}
