//! Bootstrapped ranking of methods across datasets.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetScores {
    pub name: String,
    pub cases: Vec<String>,
    /// `scores[method][case]`.
    pub scores: Vec<Vec<f64>>,
}

/// Method × dataset × case scores for one metric. Higher is better.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub metric: String,
    pub methods: Vec<String>,
    pub datasets: Vec<DatasetScores>,
}

impl ScoreTable {
    pub fn validate(&self) -> Result<()> {
        if self.methods.len() < 2 {
            return Err(Error::Invalid(format!("ranking needs >= 2 methods, got {}", self.methods.len())));
        }
        if self.datasets.is_empty() {
            return Err(Error::Invalid("score table has no datasets".into()));
        }
        for d in &self.datasets {
            if d.cases.is_empty() {
                return Err(Error::Invalid(format!("dataset {} has no cases", d.name)));
            }
            if d.scores.len() != self.methods.len() || d.scores.iter().any(|s| s.len() != d.cases.len()) {
                return Err(Error::Invalid(format!(
                    "dataset {} is not rectangular: every method needs a score for each of its {} cases",
                    d.name,
                    d.cases.len()
                )));
            }
            if d.scores.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("score table"));
            }
        }
        Ok(())
    }

    /// Maps every score through `f`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScoreTable {
        let mut t = self.clone();
        for d in &mut t.datasets {
            for v in d.scores.iter_mut().flatten() {
                *v = f(*v);
            }
        }
        t
    }
}

/// Ranks with 1 = largest value; tied values share the mean of their ranks.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankSummary {
    pub methods: Vec<String>,
    /// Aggregated rank of every method on the unresampled table.
    pub point_ranks: Vec<f64>,
    /// `replicates[b][method]`: aggregated rank in bootstrap replicate `b`.
    pub replicates: Vec<Vec<f64>>,
    pub mean_rank: Vec<f64>,
}

impl RankSummary {
    /// Fraction of replicates in which `method` has aggregated rank exactly 1.
    pub fn p_first(&self, method: usize) -> f64 {
        let hits = self.replicates.iter().filter(|r| r[method] == 1.0).count();
        hits as f64 / self.replicates.len().max(1) as f64
    }

    /// Empirical `q`-quantile (nearest rank) of a method's aggregated rank.
    pub fn quantile(&self, method: usize, q: f64) -> f64 {
        let mut v: Vec<f64> = self.replicates.iter().map(|r| r[method]).collect();
        if v.is_empty() {
            return f64::NAN;
        }
        v.sort_by(f64::total_cmp);
        let idx = ((q.clamp(0.0, 1.0) * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
        v[idx]
    }
}

fn aggregate(table: &ScoreTable, picks: &[Vec<usize>]) -> Vec<f64> {
    let m = table.methods.len();
    let mut total = vec![0.0; m];
    for (d, idx) in table.datasets.iter().zip(picks) {
        let means: Vec<f64> = d
            .scores
            .iter()
            .map(|s| idx.iter().map(|&i| s[i]).sum::<f64>() / idx.len() as f64)
            .collect();
        for (t, r) in total.iter_mut().zip(average_ranks(&means)) {
            *t += r;
        }
    }
    total.iter().map(|t| t / table.datasets.len() as f64).collect()
}

/// Per replicate: resample each dataset's cases with replacement (datasets
/// in table order, one `random_range(0..n)` draw per case), average per
/// method, rank per dataset with tie averaging, then average ranks across
/// datasets.
pub fn bootstrap_ranks<R: Rng + ?Sized>(table: &ScoreTable, n_boot: usize, rng: &mut R) -> Result<RankSummary> {
    table.validate()?;
    let identity: Vec<Vec<usize>> = table.datasets.iter().map(|d| (0..d.cases.len()).collect()).collect();
    let point_ranks = aggregate(table, &identity);
    let mut replicates = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        let picks: Vec<Vec<usize>> = table
            .datasets
            .iter()
            .map(|d| {
                let n = d.cases.len();
                (0..n).map(|_| rng.random_range(0..n)).collect()
            })
            .collect();
        replicates.push(aggregate(table, &picks));
    }
    let m = table.methods.len();
    let mean_rank = (0..m)
        .map(|k| replicates.iter().map(|r: &Vec<f64>| r[k]).sum::<f64>() / n_boot.max(1) as f64)
        .collect();
    Ok(RankSummary {
        methods: table.methods.clone(),
        point_ranks,
        replicates,
        mean_rank,
    })
}
