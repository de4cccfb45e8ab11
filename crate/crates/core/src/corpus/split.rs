use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::AnnotatedDocument;
use crate::error::{LabError, Result};

fn values(doc: &AnnotatedDocument) -> impl Iterator<Item = &str> {
    doc.spans.iter().map(|s| doc.value(s))
}

/// Seeded train/test partition.
///
/// After shuffling, the last `round(n * test_fraction)` documents are test
/// candidates. Any candidate sharing a sensitive value with a training
/// document is moved to train, repeated until no test document shares a value
/// with train.
pub fn split_train_test(
    corpus: &[AnnotatedDocument],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<AnnotatedDocument>, Vec<AnnotatedDocument>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(LabError::Config(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    if corpus.is_empty() {
        return Err(LabError::Config("cannot split an empty corpus".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n_test = ((corpus.len() as f64) * test_fraction).round() as usize;
    let (train_idx, test_idx) = order.split_at(corpus.len() - n_test);
    let mut train_idx = train_idx.to_vec();
    let mut test_idx = test_idx.to_vec();

    loop {
        let train_values: HashSet<&str> = train_idx.iter().flat_map(|&i| values(&corpus[i])).collect();
        let (leaking, clean): (Vec<usize>, Vec<usize>) = test_idx
            .iter()
            .partition(|&&i| values(&corpus[i]).any(|v| train_values.contains(v)));
        if leaking.is_empty() {
            break;
        }
        train_idx.extend(leaking);
        test_idx = clean;
    }

    if train_idx.is_empty() {
        return Err(LabError::EmptySplit("train"));
    }
    if test_idx.is_empty() {
        return Err(LabError::EmptySplit("test"));
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| corpus[i].clone()).collect::<Vec<_>>();
    Ok((pick(&train_idx), pick(&test_idx)))
}
