use serde::{Deserialize, Serialize};

use super::{DenseMask, MaskError};

/// Column-wise mask: for every key column, up to two half-open row intervals
/// of queries allowed to attend it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnRangeMask {
    rows: usize,
    columns: Vec<Vec<(usize, usize)>>,
}

impl ColumnRangeMask {
    pub const MAX_RANGES: usize = 2;

    pub fn from_dense(dense: &DenseMask) -> Result<Self, MaskError> {
        let mut columns = Vec::with_capacity(dense.cols());
        for j in 0..dense.cols() {
            let mut ranges = Vec::new();
            let mut start = None;
            for i in 0..dense.rows() {
                match (dense.get(i, j), start) {
                    (true, None) => start = Some(i),
                    (false, Some(s)) => {
                        ranges.push((s, i));
                        start = None;
                    }
                    _ => {}
                }
            }
            if let Some(s) = start {
                ranges.push((s, dense.rows()));
            }
            if ranges.len() > Self::MAX_RANGES {
                return Err(MaskError::Unrepresentable {
                    column: j,
                    intervals: ranges.len(),
                });
            }
            columns.push(ranges);
        }
        Ok(Self {
            rows: dense.rows(),
            columns,
        })
    }

    pub fn column(&self, j: usize) -> &[(usize, usize)] {
        &self.columns[j]
    }

    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn to_dense(&self) -> DenseMask {
        let mut d = DenseMask::new(self.rows, self.columns.len());
        for (j, ranges) in self.columns.iter().enumerate() {
            for &(lo, hi) in ranges {
                for i in lo..hi {
                    d.set(i, j, true);
                }
            }
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{MaskPattern, MaskSpec};

    #[test]
    fn causal_columns() {
        let c = MaskSpec::causal(4).to_column_ranges().unwrap();
        for j in 0..4 {
            assert_eq!(c.column(j), &[(j, 4)]);
        }
    }

    #[test]
    fn share_question_first_doc_columns_full() {
        let m = MaskSpec::builder(MaskPattern::ShareQuestion, 4).doc_lens(&[2, 2]).build().unwrap();
        let c = m.to_column_ranges().unwrap();
        assert_eq!(c.column(0), &[(0, 4)]);
        assert_eq!(c.column(1), &[(0, 4)]);
        assert_eq!(c.column(3), &[(3, 4)]);
        assert_eq!(c.to_dense(), m.to_dense().unwrap());
    }

    #[test]
    fn three_intervals_rejected_with_column() {
        let mut d = DenseMask::new(5, 2);
        for i in [0, 2, 4] {
            d.set(i, 1, true);
        }
        assert_eq!(
            ColumnRangeMask::from_dense(&d),
            Err(MaskError::Unrepresentable { column: 1, intervals: 3 })
        );
    }

    /// Brute-force search over small global-sliding masks: under the chosen
    /// formalization every column is the union of the global-row prefix and
    /// one band interval, so the column form never needs a third range.
    #[test]
    fn global_sliding_always_representable() {
        for s in 1..=14 {
            for w in 1..=s {
                for g in 0..=s {
                    let m = MaskSpec::builder(MaskPattern::GlobalSliding, s)
                        .window(w)
                        .global_len(g)
                        .build()
                        .unwrap();
                    let c = m.to_column_ranges().unwrap();
                    assert_eq!(c.to_dense(), m.to_dense().unwrap());
                }
            }
        }
    }

    #[test]
    fn all_patterns_round_trip() {
        let lens = [3, 5, 2, 4];
        for p in MaskPattern::ALL {
            let mut b = MaskSpec::builder(p, 16).pad_len(2);
            if p.needs_documents() {
                b = b.doc_lens(&lens);
            }
            if p.needs_window() {
                b = b.window(3);
            }
            b = match p {
                MaskPattern::PrefixLmCausal => b.prefix_lens(vec![5]),
                MaskPattern::PrefixLmDocument => b.prefix_lens(vec![1, 2, 0, 4]),
                MaskPattern::BlockCausalDocument => b.block_size(2),
                MaskPattern::GlobalSliding => b.global_len(2),
                _ => b,
            };
            let m = b.build().unwrap();
            let c = m.to_column_ranges().unwrap();
            assert_eq!(c.to_dense(), m.to_dense().unwrap(), "{p}");
        }
    }
}
