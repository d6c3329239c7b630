use rand::seq::SliceRandom;

use super::LtvSample;
use crate::error::{Error, Result};
use crate::rng;

/// Sample indices per split, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Largest-remainder apportionment of `n` items by `ratios`.
fn apportion(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for k in 0..3 {
        sizes[k] = exact[k].floor() as usize;
    }
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[k] += 1;
        left -= 1;
    }
    sizes
}

/// Seeded split stratified on the purchase indicator. Split sizes follow the
/// ratios exactly (largest remainder); buyers are apportioned the same way.
pub fn split_dataset(samples: &[LtvSample], ratios: [f64; 3], seed: u64) -> Result<Splits> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios must be >= 0 and sum to 1: {ratios:?}")));
    }
    let sizes = apportion(samples.len(), &ratios);
    if sizes.contains(&0) {
        return Err(Error::invalid(format!(
            "split sizes {sizes:?} for {} samples leave a split empty",
            samples.len()
        )));
    }
    let mut r = rng::stream(seed, "split");
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) = (0..samples.len()).partition(|&i| samples[i].is_buyer());
    pos.shuffle(&mut r);
    neg.shuffle(&mut r);
    let pos_sizes = apportion(pos.len(), &ratios);
    let mut parts: [Vec<usize>; 3] = Default::default();
    let (mut pi, mut ni) = (0, 0);
    for k in 0..3 {
        let take_pos = pos_sizes[k].min(sizes[k]);
        parts[k].extend_from_slice(&pos[pi..pi + take_pos]);
        pi += take_pos;
        let take_neg = (sizes[k] - take_pos).min(neg.len() - ni);
        parts[k].extend_from_slice(&neg[ni..ni + take_neg]);
        ni += take_neg;
    }
    // any positives left by the clamp fill remaining room in order
    for k in 0..3 {
        while parts[k].len() < sizes[k] && pi < pos.len() {
            parts[k].push(pos[pi]);
            pi += 1;
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    let [train, valid, test] = parts;
    Ok(Splits { train, valid, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(n: usize, buyer_every: usize) -> Vec<LtvSample> {
        (0..n)
            .map(|i| {
                let y = if buyer_every > 0 && i % buyer_every == 0 { 1.0 } else { 0.0 };
                LtvSample {
                    user_id: i,
                    game_id: 0,
                    domain_id: 0,
                    behavior: vec![],
                    y3: y,
                    y7: y,
                    y30: y,
                }
            })
            .collect()
    }

    #[test]
    fn ten_samples_split_seven_two_one() {
        let s = split_dataset(&samples(10, 0), [0.7, 0.2, 0.1], 1).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (7, 2, 1));
    }

    #[test]
    fn empty_split_is_rejected() {
        assert!(split_dataset(&samples(10, 0), [1.0, 0.0, 0.0], 1).is_err());
    }

    #[test]
    fn splits_are_a_disjoint_cover() {
        let s = split_dataset(&samples(1001, 7), [0.7, 0.2, 0.1], 3).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1001).collect::<Vec<_>>());
        assert_eq!(s, split_dataset(&samples(1001, 7), [0.7, 0.2, 0.1], 3).unwrap());
    }

    #[test]
    fn zero_share_is_stratified() {
        let data = samples(100_000, 13);
        let s = split_dataset(&data, [0.7, 0.2, 0.1], 5).unwrap();
        let global = data.iter().filter(|x| !x.is_buyer()).count() as f64 / data.len() as f64;
        for part in [&s.train, &s.valid, &s.test] {
            let share = part.iter().filter(|&&i| !data[i].is_buyer()).count() as f64 / part.len() as f64;
            assert!((share - global).abs() <= 0.01, "{share} vs {global}");
        }
    }
}
