//! Stratified, seeded train/validation/test splitting.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Dataset, Label, Result, RiskClass};

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Largest-remainder apportionment of `total` items over `fractions`.
fn apportion(total: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let ideal: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut out = [0usize; 3];
    for (o, i) in out.iter_mut().zip(&ideal) {
        *o = i.floor() as usize;
    }
    let mut left = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (ideal[a] - ideal[a].floor(), ideal[b] - ideal[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &j in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[j] += 1;
        left -= 1;
    }
    out
}

/// Splits `dataset` into train/val/test by `fractions`, stratified on
/// (label, risk class).
///
/// Overall split sizes follow largest-remainder rounding; each stratum's
/// share of a split is within one clip of its proportional size. Clips keep
/// their original relative order inside each split.
pub fn split_dataset(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Splits> {
    if dataset.is_empty() {
        return Err(DataError::Empty);
    }
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::Fractions { sum });
    }

    let mut strata: BTreeMap<(Label, Option<RiskClass>), Vec<usize>> = BTreeMap::new();
    for (i, clip) in dataset.clips.iter().enumerate() {
        let a = &clip.annotation;
        strata.entry((a.label, a.risk_class)).or_default().push(i);
    }

    let targets = apportion(dataset.len(), &fractions);
    let mut base: Vec<[usize; 3]> = Vec::new();
    let mut fracs: Vec<[f64; 3]> = Vec::new();
    for members in strata.values() {
        let n = members.len() as f64;
        let mut b = [0usize; 3];
        let mut r = [0f64; 3];
        for j in 0..3 {
            let ideal = n * fractions[j];
            b[j] = ideal.floor() as usize;
            r[j] = ideal - ideal.floor();
        }
        base.push(b);
        fracs.push(r);
    }
    let mut deficit = [0isize; 3];
    for j in 0..3 {
        deficit[j] = targets[j] as isize - base.iter().map(|b| b[j] as isize).sum::<isize>();
    }

    // Hand out each stratum's leftover clips, at most one extra per split,
    // preferring splits with the largest outstanding deficit.
    let mut order: Vec<usize> = (0..base.len()).collect();
    let leftover = |s: usize| -> usize {
        strata.values().nth(s).map_or(0, |m| m.len()) - base[s].iter().sum::<usize>()
    };
    let leftovers: Vec<usize> = (0..base.len()).map(leftover).collect();
    order.sort_by(|&a, &b| leftovers[b].cmp(&leftovers[a]).then(a.cmp(&b)));
    for &s in &order {
        let mut used = [false; 3];
        for _ in 0..leftovers[s] {
            let j = (0..3)
                .filter(|&j| !used[j])
                .max_by(|&a, &b| {
                    deficit[a]
                        .cmp(&deficit[b])
                        .then(fracs[s][a].total_cmp(&fracs[s][b]))
                        .then(b.cmp(&a))
                })
                .expect("fewer than three leftovers per stratum");
            used[j] = true;
            base[s][j] += 1;
            deficit[j] -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assigned: [Vec<usize>; 3] = Default::default();
    for (s, members) in strata.values().enumerate() {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        let mut it = shuffled.into_iter();
        for (j, bucket) in assigned.iter_mut().enumerate() {
            bucket.extend(it.by_ref().take(base[s][j]));
        }
    }

    let [train, val, test] = assigned.map(|mut idx| {
        idx.sort_unstable();
        Dataset {
            dims: dataset.dims,
            clips: idx.into_iter().map(|i| dataset.clips[i].clone()).collect(),
        }
    });
    Ok(Splits { train, val, test })
}
