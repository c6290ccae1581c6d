use crate::error::{Error, Result};

/// Sparse binary user-by-item matrix in compressed-row form.
///
/// Every stored `(user, item)` pair is a positive interaction. Rows are kept
/// sorted and duplicate free, so membership tests are a binary search.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionMatrix {
    n_items: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
}

impl InteractionMatrix {
    pub fn empty(n_users: usize, n_items: usize) -> Self {
        InteractionMatrix {
            n_items,
            indptr: vec![0; n_users + 1],
            indices: Vec::new(),
        }
    }

    /// Builds a matrix from per-user item lists. Rows are sorted here; a
    /// repeated item or an index outside `[0, n_items)` is rejected.
    pub fn from_rows(n_items: usize, rows: Vec<Vec<u32>>) -> Result<Self> {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::with_capacity(rows.iter().map(Vec::len).sum());
        indptr.push(0);
        for (user, mut row) in rows.into_iter().enumerate() {
            row.sort_unstable();
            if let Some(w) = row.windows(2).find(|w| w[0] == w[1]) {
                return Err(Error::invalid(format!(
                    "user {user} has item {} twice",
                    w[0]
                )));
            }
            if let Some(&last) = row.last() {
                if last as usize >= n_items {
                    return Err(Error::invalid(format!(
                        "user {user} references item {last} but the catalogue has {n_items} items"
                    )));
                }
            }
            indices.extend_from_slice(&row);
            indptr.push(indices.len());
        }
        Ok(InteractionMatrix {
            n_items,
            indptr,
            indices,
        })
    }

    /// Validating constructor over raw compressed-row arrays.
    pub fn from_csr(n_items: usize, indptr: Vec<usize>, indices: Vec<u32>) -> Result<Self> {
        if indptr.first() != Some(&0) || indptr.last() != Some(&indices.len()) {
            return Err(Error::invalid("row pointer does not span the index array"));
        }
        for (user, w) in indptr.windows(2).enumerate() {
            if w[0] > w[1] {
                return Err(Error::invalid(format!("row pointer decreases at user {user}")));
            }
            let row = &indices[w[0]..w[1]];
            if row.windows(2).any(|p| p[0] >= p[1]) {
                return Err(Error::invalid(format!(
                    "row {user} is not strictly increasing"
                )));
            }
            if row.last().is_some_and(|&j| j as usize >= n_items) {
                return Err(Error::invalid(format!("row {user} has an item out of range")));
            }
        }
        Ok(InteractionMatrix {
            n_items,
            indptr,
            indices,
        })
    }

    pub fn n_users(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, user: usize) -> &[u32] {
        &self.indices[self.indptr[user]..self.indptr[user + 1]]
    }

    pub fn row_len(&self, user: usize) -> usize {
        self.indptr[user + 1] - self.indptr[user]
    }

    pub fn contains(&self, user: usize, item: u32) -> bool {
        self.row(user).binary_search(&item).is_ok()
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[u32]> + '_ {
        self.indptr.windows(2).map(|w| &self.indices[w[0]..w[1]])
    }

    /// Users whose row is nonempty, in ascending order.
    pub fn active_users(&self) -> Vec<usize> {
        (0..self.n_users()).filter(|&u| self.row_len(u) > 0).collect()
    }

    /// Per-item interaction counts, i.e. the column sums.
    pub fn column_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.n_items];
        for &j in &self.indices {
            counts[j as usize] += 1;
        }
        counts
    }

    /// Fraction of the `m × n` cells that are stored.
    pub fn density(&self) -> f64 {
        let cells = self.n_users() as f64 * self.n_items as f64;
        if cells == 0.0 {
            0.0
        } else {
            self.nnz() as f64 / cells
        }
    }

    /// Writes the user's row as a dense 0/1 vector into `out`.
    pub fn fill_dense(&self, user: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_items);
        out.fill(0.0);
        for &j in self.row(user) {
            out[j as usize] = 1.0;
        }
    }

    /// Copy of the matrix with every row not flagged in `keep` emptied.
    pub fn mask_rows(&self, keep: &[bool]) -> Self {
        assert_eq!(keep.len(), self.n_users());
        let rows = (0..self.n_users())
            .map(|u| if keep[u] { self.row(u).to_vec() } else { Vec::new() })
            .collect();
        InteractionMatrix::from_rows(self.n_items, rows).expect("masking preserves validity")
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }
}

/// Train, validation and test matrices sharing one `m × n` shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: InteractionMatrix,
    pub validation: InteractionMatrix,
    pub test: InteractionMatrix,
}

impl DatasetSplit {
    pub fn new(
        train: InteractionMatrix,
        validation: InteractionMatrix,
        test: InteractionMatrix,
    ) -> Result<Self> {
        for other in [&validation, &test] {
            Error::check_dim(train.n_users(), other.n_users())?;
            Error::check_dim(train.n_items(), other.n_items())?;
        }
        Ok(DatasetSplit {
            train,
            validation,
            test,
        })
    }

    pub fn n_users(&self) -> usize {
        self.train.n_users()
    }

    pub fn n_items(&self) -> usize {
        self.train.n_items()
    }

    pub fn mask_users(&self, keep: &[bool]) -> Self {
        DatasetSplit {
            train: self.train.mask_rows(keep),
            validation: self.validation.mask_rows(keep),
            test: self.test.mask_rows(keep),
        }
    }
}

/// Item popularity measured on a training matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PopularityProfile {
    pub counts: Vec<u64>,
    pub total: u64,
    pub probs: Vec<f64>,
}

impl PopularityProfile {
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::invalid("popularity of an empty training matrix"));
        }
        let t = total as f64;
        let probs = counts.iter().map(|&c| c as f64 / t).collect();
        Ok(PopularityProfile {
            counts,
            total,
            probs,
        })
    }

    pub fn n_items(&self) -> usize {
        self.counts.len()
    }

    /// Index of the most frequent item; the lowest index wins a tie.
    pub fn most_popular(&self) -> usize {
        let max = *self.counts.iter().max().unwrap_or(&0);
        self.counts.iter().position(|&c| c == max).unwrap_or(0)
    }
}

/// Normalized item frequencies of the training matrix.
pub fn popularity(train: &InteractionMatrix) -> Result<PopularityProfile> {
    PopularityProfile::from_counts(train.column_counts())
}
