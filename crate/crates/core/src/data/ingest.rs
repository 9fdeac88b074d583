//! Delimited rating-log ingestion and normalization.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::matrix::{Rating, RatingMatrix};
use crate::error::{Error, Result};

/// Layout of a `user<delim>item<delim>rating[<delim>timestamp]` file.
#[derive(Clone, Debug, PartialEq)]
pub struct RatingFormat {
    pub delimiter: char,
    /// Top of the raw scale; ratings must lie in `(0, max_rating]`.
    pub max_rating: f64,
}

impl Default for RatingFormat {
    fn default() -> Self {
        Self {
            delimiter: ',',
            max_rating: 5.0,
        }
    }
}

/// Normalized ratings plus the external ids behind each index.
#[derive(Clone, Debug)]
pub struct IngestedRatings {
    pub matrix: RatingMatrix,
    pub item_ids: Vec<String>,
    pub user_ids: Vec<String>,
}

/// `r / r_max`, keeping zero free as the "unobserved" sentinel.
pub fn normalize(raw: f64, max_rating: f64) -> Result<f64> {
    if !(max_rating > 0.0) || !max_rating.is_finite() {
        return Err(Error::Data(format!("max rating must be > 0, got {max_rating}")));
    }
    if !(raw > 0.0) {
        return Err(Error::Data(format!(
            "rating {raw} must be > 0 (0 marks an unobserved cell)"
        )));
    }
    if raw > max_rating {
        return Err(Error::Data(format!("rating {raw} exceeds scale maximum {max_rating}")));
    }
    Ok(raw / max_rating)
}

pub fn denormalize(value: f64, max_rating: f64) -> f64 {
    value * max_rating
}

fn index_of(map: &mut HashMap<String, usize>, ids: &mut Vec<String>, id: &str) -> usize {
    if let Some(&i) = map.get(id) {
        return i;
    }
    let i = ids.len();
    map.insert(id.to_string(), i);
    ids.push(id.to_string());
    i
}

/// Parses rating lines from `text`; `origin` labels error messages.
pub fn parse_ratings(text: &str, origin: &str, format: &RatingFormat) -> Result<IngestedRatings> {
    let mut item_map = HashMap::new();
    let mut user_map = HashMap::new();
    let mut item_ids = Vec::new();
    let mut user_ids = Vec::new();
    let mut latest: HashMap<(usize, usize), f64> = HashMap::new();
    let mut order: Vec<(usize, usize)> = Vec::new();

    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };

    for (lineno, raw_line) in text.lines().enumerate() {
        let line = raw_line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(format.delimiter).map(str::trim).collect();
        if lineno == 0 && fields.get(2).is_none_or(|f| f.parse::<f64>().is_err()) {
            // header
            continue;
        }
        if fields.len() < 3 || fields.len() > 4 {
            return Err(parse_err(
                lineno + 1,
                format!("expected 3 or 4 fields, found {}", fields.len()),
            ));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(parse_err(lineno + 1, "empty user or item id".into()));
        }
        let raw: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(lineno + 1, format!("rating `{}` is not a number", fields[2])))?;
        let value =
            normalize(raw, format.max_rating).map_err(|e| parse_err(lineno + 1, e.to_string()))?;
        let user = index_of(&mut user_map, &mut user_ids, fields[0]);
        let item = index_of(&mut item_map, &mut item_ids, fields[1]);
        if latest.insert((item, user), value).is_none() {
            order.push((item, user));
        }
    }

    if order.is_empty() {
        return Err(Error::NoRatings(origin.to_string()));
    }
    let entries = order
        .into_iter()
        .map(|(item, user)| Rating {
            item,
            user,
            value: latest[&(item, user)],
        })
        .collect();
    let matrix = RatingMatrix::new(item_ids.len(), user_ids.len(), entries)?;
    Ok(IngestedRatings {
        matrix,
        item_ids,
        user_ids,
    })
}

/// Reads and normalizes a rating file. Duplicate `(user, item)` pairs keep the last rating.
pub fn ingest_ratings(path: &Path, format: &RatingFormat) -> Result<IngestedRatings> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ratings(&text, &path.display().to_string(), format)
}
