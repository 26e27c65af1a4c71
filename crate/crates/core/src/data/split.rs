use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ConnectomeDataset;
use crate::error::{Error, Result};

/// Train / validation / test.
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.70, 0.10, 0.20];

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: ConnectomeDataset,
    pub val: ConnectomeDataset,
    pub test: ConnectomeDataset,
}

/// Per class: shuffle with `seed`, give `floor(fraction * count)` subjects to
/// train, val and test in that order, and the remainder to train. Each split
/// keeps the dataset's original subject order.
pub fn stratified_split(dataset: &ConnectomeDataset, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!(
            "split fractions must be in [0, 1] and sum to 1, got {fractions:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for class in 0..2 {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.subjects[i].label == class)
            .collect();
        if members.len() < 3 {
            return Err(Error::Split(format!(
                "class {class} has {} subjects, need at least 3",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let count = members.len() as f64;
        // the small offset keeps products like 0.7 * 10 from flooring to 6
        let sizes = fractions.map(|f| (f * count + 1e-9).floor() as usize);
        let remainder = members.len() - sizes.iter().sum::<usize>();
        let mut rest = members.as_slice();
        for (part, size) in parts.iter_mut().zip([sizes[0] + remainder, sizes[1], sizes[2]]) {
            let (head, tail) = rest.split_at(size);
            part.extend_from_slice(head);
            rest = tail;
        }
    }
    let [mut train, mut val, mut test] = parts;
    for p in [&mut train, &mut val, &mut test] {
        p.sort_unstable();
    }
    Ok(Split {
        train: dataset.subset(&train),
        val: dataset.subset(&val),
        test: dataset.subset(&test),
    })
}
