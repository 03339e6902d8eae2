use serde::{Deserialize, Serialize};

use crate::error::{ApiError, Result};
use crate::study::{Source, CRITERIA};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: u64,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single rating.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionRow {
    /// 1-based criterion number.
    pub index: usize,
    pub criterion: String,
    pub generated: Option<Summary>,
    pub ground_truth: Option<Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub rows: Vec<CriterionRow>,
    pub records: u64,
    pub generated_records: u64,
    pub ground_truth_records: u64,
}

#[derive(Clone, Copy, Default)]
struct Moments {
    n: u64,
    sum: u64,
    sum_sq: u64,
}

impl Moments {
    fn push(&mut self, v: u8) {
        self.n += 1;
        self.sum += u64::from(v);
        self.sum_sq += u64::from(v) * u64::from(v);
    }

    /// Integer moments make the result independent of record order.
    fn summary(self) -> Option<Summary> {
        if self.n == 0 {
            return None;
        }
        let n = self.n as f64;
        let std = if self.n == 1 {
            0.0
        } else {
            let spread = self.n * self.sum_sq - self.sum * self.sum;
            (spread as f64 / (n * (n - 1.0))).sqrt()
        };
        Some(Summary {
            n: self.n,
            mean: self.sum as f64 / n,
            std,
        })
    }
}

/// Mean and sample standard deviation per criterion and source.
pub fn aggregate<'a>(records: impl IntoIterator<Item = (Source, &'a [u8; 5])>) -> Result<AggregateReport> {
    let mut gen = [Moments::default(); 5];
    let mut gt = [Moments::default(); 5];
    let (mut n_gen, mut n_gt) = (0, 0);
    for (source, scores) in records {
        let target = match source {
            Source::Generated => {
                n_gen += 1;
                &mut gen
            }
            Source::GroundTruth => {
                n_gt += 1;
                &mut gt
            }
        };
        for (m, &s) in target.iter_mut().zip(scores) {
            m.push(s);
        }
    }
    if n_gen + n_gt == 0 {
        return Err(ApiError::EmptyReport);
    }
    let rows = CRITERIA
        .iter()
        .enumerate()
        .map(|(i, c)| CriterionRow {
            index: i + 1,
            criterion: (*c).to_owned(),
            generated: gen[i].summary(),
            ground_truth: gt[i].summary(),
        })
        .collect();
    Ok(AggregateReport {
        rows,
        records: n_gen + n_gt,
        generated_records: n_gen,
        ground_truth_records: n_gt,
    })
}

impl AggregateReport {
    /// Criteria rows with Generated and Ground-truth `mean ± std` columns.
    pub fn table(&self) -> String {
        let cell = |s: &Option<Summary>| match s {
            Some(s) => format!("{:.2} ± {:.2}", s.mean, s.std),
            None => "-".to_owned(),
        };
        let mut out = format!("{:<92} {:>13} {:>13}\n", "Criteria", "Generated", "Ground-truth");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<92} {:>13} {:>13}\n",
                r.criterion,
                cell(&r.generated),
                cell(&r.ground_truth)
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(first: u8) -> [u8; 5] {
        [first, 3, 3, 3, 3]
    }

    #[test]
    fn hand_computed_mean_and_sample_std() {
        let recs = [scores(4), scores(5), scores(3)];
        let r = aggregate(recs.iter().map(|s| (Source::Generated, s))).unwrap();
        let g = r.rows[0].generated.unwrap();
        assert_eq!((g.n, g.mean, g.std), (3, 4.0, 1.0));
        assert_eq!(r.rows[1].generated.unwrap().std, 0.0);
        assert!(r.rows[0].ground_truth.is_none());
    }

    #[test]
    fn single_rating_has_zero_std() {
        let s = scores(2);
        let r = aggregate([(Source::GroundTruth, &s)]).unwrap();
        let g = r.rows[0].ground_truth.unwrap();
        assert_eq!((g.mean, g.std), (2.0, 0.0));
    }

    #[test]
    fn empty_is_an_error() {
        assert!(matches!(aggregate(std::iter::empty()), Err(ApiError::EmptyReport)));
    }

    #[test]
    fn order_does_not_matter() {
        let recs: Vec<(Source, [u8; 5])> = (0..40u32)
            .map(|i| {
                let src = if i % 3 == 0 { Source::GroundTruth } else { Source::Generated };
                let s = [1 + i % 5, 1 + i * 7 % 5, 1 + i * 3 % 5, 5 - i % 5, 1 + i / 9];
                (src, s.map(|v| v as u8))
            })
            .collect();
        let a = aggregate(recs.iter().map(|(s, r)| (*s, r))).unwrap();
        let b = aggregate(recs.iter().rev().map(|(s, r)| (*s, r))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn table_lists_five_criteria() {
        let s = scores(4);
        let t = aggregate([(Source::Generated, &s)]).unwrap().table();
        assert_eq!(t.lines().count(), 6);
        assert!(t.lines().nth(1).unwrap().starts_with(CRITERIA[0]));
        assert!(t.contains("4.00 ± 0.00"));
    }
}
