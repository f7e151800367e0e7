//! Pairwise latent distances, per-category aggregates and
//! indistinguishability curves.
//!
//! Aggregates are parallel over pairs but always reduced in a fixed order with
//! compensated summation, so results do not depend on the thread count.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::attribute::{check_rho, LossModel};
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::pipeline::DatasetManifest;
use crate::schedule::NoiseSchedule;

/// Neumaier-compensated sum.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Euclidean norm of `x - y`.
pub fn latent_distance(x: &Latent, y: &Latent) -> Result<f64> {
    x.ensure_same_shape(y)?;
    Ok(neumaier_sum(x.data().iter().zip(y.data()).map(|(&a, &b)| {
        let d = a as f64 - b as f64;
        d * d
    }))
    .sqrt())
}

/// Mean distance over all unordered pairs.
pub fn intra_category_distance(images: &[Latent]) -> Result<f64> {
    let n = images.len();
    if n < 2 {
        return Err(Error::Empty(format!(
            "intra-category distance needs at least 2 images, got {n}"
        )));
    }
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let dists = pairs
        .par_iter()
        .map(|&(i, j)| latent_distance(&images[i], &images[j]))
        .collect::<Result<Vec<_>>>()?;
    Ok(neumaier_sum(dists) * 2.0 / (n * (n - 1)) as f64)
}

/// Mean distance over all cross pairs; symmetric in its arguments.
pub fn cross_category_distance(a: &[Latent], b: &[Latent]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("cross-category distance needs nonempty sets".into()));
    }
    // Sum in a canonical order so that cross(a, b) and cross(b, a) are bitwise equal.
    let (outer, inner) = if canonical_first(a, b) { (a, b) } else { (b, a) };
    let dists = outer
        .par_iter()
        .flat_map_iter(|x| inner.iter().map(move |y| latent_distance(x, y)))
        .collect::<Result<Vec<_>>>()?;
    Ok(neumaier_sum(dists) / (a.len() * b.len()) as f64)
}

fn canonical_first(a: &[Latent], b: &[Latent]) -> bool {
    let key = |s: &[Latent]| (s.len(), s[0].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    key(a) <= key(b)
}

/// Mean pairwise distances between categories; the diagonal holds intra-category means.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub categories: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    /// Whether every diagonal entry is strictly below every other entry in its row.
    pub fn diagonal_dominates(&self) -> bool {
        (0..self.categories.len()).all(|i| {
            (0..self.categories.len())
                .filter(|&j| j != i)
                .all(|j| self.values[i][i] < self.values[i][j])
        })
    }

    /// CSV with a header row and a leading category column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category");
        for c in &self.categories {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (c, row) in self.categories.iter().zip(&self.values) {
            out.push_str(c);
            for v in row {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Builds the matrix from `(category, image)` pairs; categories are sorted by name.
pub fn distance_matrix_from_labeled(items: &[(String, Latent)]) -> Result<DistanceMatrix> {
    let groups = group_by_category(items);
    for (name, imgs) in &groups {
        if imgs.len() < 2 {
            return Err(Error::Manifest(format!(
                "category `{name}` has {} image(s); at least 2 are required",
                imgs.len()
            )));
        }
    }
    let categories: Vec<String> = groups.keys().cloned().collect();
    let sets: Vec<Vec<Latent>> = groups.into_values().collect();
    let k = categories.len();
    let mut values = vec![vec![0.0; k]; k];
    for i in 0..k {
        values[i][i] = intra_category_distance(&sets[i])?;
        for j in i + 1..k {
            let d = cross_category_distance(&sets[i], &sets[j])?;
            values[i][j] = d;
            values[j][i] = d;
        }
    }
    Ok(DistanceMatrix { categories, values })
}

fn group_by_category(items: &[(String, Latent)]) -> BTreeMap<String, Vec<Latent>> {
    let mut groups: BTreeMap<String, Vec<Latent>> = BTreeMap::new();
    for (c, x) in items {
        groups.entry(c.clone()).or_default().push(x.clone());
    }
    groups
}

/// Loads every record of the manifest and builds its category distance matrix.
pub fn build_distance_matrix(manifest: &DatasetManifest) -> Result<DistanceMatrix> {
    distance_matrix_from_labeled(&manifest.load_labeled()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairTag {
    Intra,
    Cross,
}

/// All unordered pairs of the labeled set with their distance and tag.
pub fn labeled_pair_distances(items: &[(String, Latent)]) -> Result<Vec<(f64, PairTag)>> {
    let n = items.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    pairs
        .par_iter()
        .map(|&(i, j)| {
            let tag = if items[i].0 == items[j].0 {
                PairTag::Intra
            } else {
                PairTag::Cross
            };
            Ok((latent_distance(&items[i].1, &items[j].1)?, tag))
        })
        .collect()
}

/// Per-step fraction of pairs whose attribute loss exceeds `rho`, split by tag.
#[derive(Debug, Clone, PartialEq)]
pub struct IndistinguishabilityCurve {
    pub steps: Vec<usize>,
    pub intra_exceeding: Vec<usize>,
    pub cross_exceeding: Vec<usize>,
    pub intra_total: usize,
    pub cross_total: usize,
}

impl IndistinguishabilityCurve {
    /// `None` when there are no pairs with this tag.
    pub fn fraction(&self, tag: PairTag, index: usize) -> Option<f64> {
        let (counts, total) = match tag {
            PairTag::Intra => (&self.intra_exceeding, self.intra_total),
            PairTag::Cross => (&self.cross_exceeding, self.cross_total),
        };
        (total > 0).then(|| counts[index] as f64 / total as f64)
    }

    pub fn fractions(&self, tag: PairTag) -> Option<Vec<f64>> {
        (0..self.steps.len())
            .map(|i| self.fraction(tag, i))
            .collect()
    }

    /// First step at which at least `level` of the tagged pairs exceed `rho`.
    pub fn first_step_reaching(&self, tag: PairTag, level: f64) -> Option<usize> {
        (0..self.steps.len())
            .find(|&i| self.fraction(tag, i).is_some_and(|f| f >= level))
            .map(|i| self.steps[i])
    }

    /// Header `t,intra_fraction,cross_fraction`; empty cells for absent tags.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|f| format!("{f:.6}")).unwrap_or_default();
        let mut out = String::from("t,intra_fraction,cross_fraction\n");
        for (i, t) in self.steps.iter().enumerate() {
            out.push_str(&format!(
                "{t},{},{}\n",
                cell(self.fraction(PairTag::Intra, i)),
                cell(self.fraction(PairTag::Cross, i))
            ));
        }
        out
    }
}

/// Curve from precomputed pair distances.
pub fn indistinguishability_from_distances(
    pairs: &[(f64, PairTag)],
    schedule: &NoiseSchedule,
    rho: f64,
    model: LossModel,
) -> Result<IndistinguishabilityCurve> {
    if pairs.is_empty() {
        return Err(Error::Empty("no pairs given".into()));
    }
    check_rho(rho)?;
    let steps = schedule.steps();
    let curves = pairs
        .par_iter()
        .map(|&(d, tag)| Ok((model.curve_from_distance(d, schedule)?, tag)))
        .collect::<Result<Vec<_>>>()?;
    let mut intra = vec![0usize; steps];
    let mut cross = vec![0usize; steps];
    let (mut intra_total, mut cross_total) = (0, 0);
    for (losses, tag) in &curves {
        let counts = match tag {
            PairTag::Intra => {
                intra_total += 1;
                &mut intra
            }
            PairTag::Cross => {
                cross_total += 1;
                &mut cross
            }
        };
        for (c, &l) in counts.iter_mut().zip(losses) {
            if l > rho {
                *c += 1;
            }
        }
    }
    Ok(IndistinguishabilityCurve {
        steps: (1..=steps).collect(),
        intra_exceeding: intra,
        cross_exceeding: cross,
        intra_total,
        cross_total,
    })
}

pub fn indistinguishability_curve(
    pairs: &[(Latent, Latent, PairTag)],
    schedule: &NoiseSchedule,
    rho: f64,
    model: LossModel,
) -> Result<IndistinguishabilityCurve> {
    let dists = pairs
        .iter()
        .map(|(x, y, tag)| Ok((latent_distance(x, y)?, *tag)))
        .collect::<Result<Vec<_>>>()?;
    indistinguishability_from_distances(&dists, schedule, rho, model)
}
