use super::DatasetError;
use crate::rules::SafetyScore;

/// Per-item rating counts over the five safety levels, -2 first.
pub type CountRow = [u32; 5];

/// Fleiss' kappa for a fixed number of raters per item.
pub fn fleiss_kappa(table: &[CountRow]) -> Result<f64, DatasetError> {
    if table.is_empty() {
        return Err(DatasetError::Agreement("no items".into()));
    }
    let n = table[0].iter().sum::<u32>() as u64;
    if let Some((i, row)) = table.iter().enumerate().find(|(_, r)| r.iter().sum::<u32>() as u64 != n) {
        return Err(DatasetError::Agreement(format!(
            "item {i} has {} ratings, expected {n} like item 0",
            row.iter().sum::<u32>()
        )));
    }
    if n < 2 {
        return Err(DatasetError::Agreement(format!("need at least 2 ratings per item, got {n}")));
    }
    let items = table.len() as u64;

    let mut column = [0u64; 5];
    let mut agree_pairs = 0u64;
    for row in table {
        for (j, &c) in row.iter().enumerate() {
            let c = c as u64;
            column[j] += c;
            agree_pairs += c * c.saturating_sub(1);
        }
    }
    let total = (items * n) as f64;
    let p_bar = agree_pairs as f64 / (items * n * (n - 1)) as f64;
    let p_e: f64 = column.iter().map(|&c| (c as f64 / total).powi(2)).sum();

    if column.iter().filter(|&&c| c > 0).count() == 1 {
        // every rating in one category
        return if agree_pairs == items * n * (n - 1) {
            Ok(1.0)
        } else {
            Err(DatasetError::Agreement("degenerate marginal".into()))
        };
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// Builds a count table from per-item rating lists.
pub fn count_table<'a, I>(items: I) -> Vec<CountRow>
where
    I: IntoIterator<Item = &'a [SafetyScore]>,
{
    items
        .into_iter()
        .map(|ratings| {
            let mut row = [0u32; 5];
            for s in ratings {
                row[s.index()] += 1;
            }
            row
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unanimous_tables_give_one() {
        let table: Vec<CountRow> = (0..10).map(|i| {
            let mut r = [0; 5];
            r[i % 5] = 3;
            r
        }).collect();
        assert_eq!(fleiss_kappa(&table).unwrap(), 1.0);
        assert_eq!(fleiss_kappa(&[[3, 0, 0, 0, 0], [0, 3, 0, 0, 0]]).unwrap(), 1.0);
        assert_eq!(fleiss_kappa(&[[0, 0, 4, 0, 0], [0, 0, 4, 0, 0]]).unwrap(), 1.0);
    }

    #[test]
    fn unequal_ratings_rejected() {
        assert!(fleiss_kappa(&[[3, 0, 0, 0, 0], [0, 2, 0, 0, 0]]).is_err());
        assert!(fleiss_kappa(&[[1, 0, 0, 0, 0]]).is_err());
        assert!(fleiss_kappa(&[]).is_err());
    }

    #[test]
    fn systematic_disagreement_is_negative() {
        let k = fleiss_kappa(&[[1, 1, 0, 0, 0], [1, 1, 0, 0, 0]]).unwrap();
        assert!(k < 0.0 && k >= -1.0);
    }

    #[test]
    fn counts_from_ratings() {
        let a = [SafetyScore::TotallySafe, SafetyScore::TotallySafe, SafetyScore::KeepCaution];
        let t = count_table([&a[..]]);
        assert_eq!(t, vec![[0, 0, 1, 0, 2]]);
    }
}
