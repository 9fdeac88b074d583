use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Mask;

/// Which entity type a row of a dense batch describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Rows are item vectors (the `M = R` orientation).
    Items,
    /// Rows are user vectors (the `U = Rᵀ` orientation).
    Users,
}

impl Axis {
    pub fn other(self) -> Axis {
        match self {
            Axis::Items => Axis::Users,
            Axis::Users => Axis::Items,
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::Items => "items",
            Axis::Users => "users",
        })
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "items" | "item" => Ok(Axis::Items),
            "users" | "user" => Ok(Axis::Users),
            other => Err(Error::Config(format!(
                "unknown axis `{other}` (expected items or users)"
            ))),
        }
    }
}

/// Densely materialized rows with their observation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseRows {
    pub values: Array2<f64>,
    pub mask: Mask,
}

impl DenseRows {
    pub fn observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub item: usize,
    pub user: usize,
    pub value: f64,
}

/// Sparse store of normalized ratings in `(0, 1]`; a zero cell means "unobserved".
#[derive(Clone, Debug, PartialEq)]
pub struct RatingMatrix {
    n_items: usize,
    n_users: usize,
    /// Sorted by `(item, user)`.
    entries: Vec<Rating>,
    by_item: Vec<Vec<(usize, f64)>>,
    by_user: Vec<Vec<(usize, f64)>>,
}

impl RatingMatrix {
    pub fn new(n_items: usize, n_users: usize, mut entries: Vec<Rating>) -> Result<Self> {
        for r in &entries {
            if r.item >= n_items || r.user >= n_users {
                return Err(Error::Data(format!(
                    "rating ({}, {}) outside {}×{}",
                    r.item, r.user, n_items, n_users
                )));
            }
            if !(r.value > 0.0 && r.value <= 1.0) {
                return Err(Error::Data(format!(
                    "rating ({}, {}) = {} not in (0, 1]",
                    r.item, r.user, r.value
                )));
            }
        }
        entries.sort_by_key(|r| (r.item, r.user));
        if let Some(w) = entries
            .windows(2)
            .find(|w| (w[0].item, w[0].user) == (w[1].item, w[1].user))
        {
            return Err(Error::Data(format!(
                "duplicate rating for item {} user {}",
                w[0].item, w[0].user
            )));
        }
        let mut by_item = vec![Vec::new(); n_items];
        let mut by_user = vec![Vec::new(); n_users];
        for r in &entries {
            by_item[r.item].push((r.user, r.value));
            by_user[r.user].push((r.item, r.value));
        }
        Ok(Self {
            n_items,
            n_users,
            entries,
            by_item,
            by_user,
        })
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn entries(&self) -> &[Rating] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Number of rows in the given orientation.
    pub fn count(&self, axis: Axis) -> usize {
        match axis {
            Axis::Items => self.n_items,
            Axis::Users => self.n_users,
        }
    }

    /// Row width in the given orientation.
    pub fn width(&self, axis: Axis) -> usize {
        self.count(axis.other())
    }

    pub fn sparsity(&self) -> f64 {
        let cells = (self.n_items * self.n_users) as f64;
        if cells == 0.0 {
            return 1.0;
        }
        1.0 - self.entries.len() as f64 / cells
    }

    pub fn get(&self, item: usize, user: usize) -> Option<f64> {
        self.by_item.get(item)?.iter().find(|(u, _)| *u == user).map(|&(_, v)| v)
    }

    /// Sparse content of one row in the given orientation.
    pub fn row(&self, axis: Axis, index: usize) -> &[(usize, f64)] {
        match axis {
            Axis::Items => &self.by_item[index],
            Axis::Users => &self.by_user[index],
        }
    }

    /// Dense rows of `M` (items) or `U` (users) for the requested indices.
    pub fn rows(&self, axis: Axis, indices: &[usize]) -> DenseRows {
        let width = self.width(axis);
        let mut values = Array2::zeros((indices.len(), width));
        let mut mask = Array2::from_elem((indices.len(), width), false);
        for (r, &idx) in indices.iter().enumerate() {
            for &(c, v) in self.row(axis, idx) {
                values[[r, c]] = v;
                mask[[r, c]] = true;
            }
        }
        DenseRows { values, mask }
    }

    pub fn item_rows(&self, items: &[usize]) -> DenseRows {
        self.rows(Axis::Items, items)
    }

    pub fn user_rows(&self, users: &[usize]) -> DenseRows {
        self.rows(Axis::Users, users)
    }

    /// `R[rows, cols]` with rows taken along `axis`.
    pub fn block(&self, axis: Axis, rows: &[usize], cols: &[usize]) -> DenseRows {
        let width = self.width(axis);
        let mut position = vec![usize::MAX; width];
        for (c, &col) in cols.iter().enumerate() {
            position[col] = c;
        }
        let mut values = Array2::zeros((rows.len(), cols.len()));
        let mut mask = Array2::from_elem((rows.len(), cols.len()), false);
        for (r, &idx) in rows.iter().enumerate() {
            for &(c, v) in self.row(axis, idx) {
                let p = position[c];
                if p != usize::MAX {
                    values[[r, p]] = v;
                    mask[[r, p]] = true;
                }
            }
        }
        DenseRows { values, mask }
    }

    /// The full `m × n` item-oriented matrix.
    pub fn dense_m(&self) -> Array2<f64> {
        let all: Vec<usize> = (0..self.n_items).collect();
        self.rows(Axis::Items, &all).values
    }

    /// The full `n × m` user-oriented matrix.
    pub fn dense_u(&self) -> Array2<f64> {
        let all: Vec<usize> = (0..self.n_users).collect();
        self.rows(Axis::Users, &all).values
    }

    pub fn transpose(&self) -> RatingMatrix {
        let entries = self
            .entries
            .iter()
            .map(|r| Rating {
                item: r.user,
                user: r.item,
                value: r.value,
            })
            .collect();
        RatingMatrix::new(self.n_users, self.n_items, entries).expect("transpose of valid matrix")
    }

    /// Keeps only ratings for which `keep` returns true.
    pub fn filter<F: FnMut(&Rating) -> bool>(&self, mut keep: F) -> RatingMatrix {
        let entries = self.entries.iter().copied().filter(|r| keep(r)).collect();
        RatingMatrix::new(self.n_items, self.n_users, entries).expect("subset of valid matrix")
    }

    pub fn mean_rating(&self) -> Option<f64> {
        if self.entries.is_empty() {
            return None;
        }
        Some(self.entries.iter().map(|r| r.value).sum::<f64>() / self.entries.len() as f64)
    }
}
