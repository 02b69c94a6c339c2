use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ItlError, Result};

/// Splits case ids 4:1 into (train, test). The test share is
/// `max(1, round(n / 5))` cases; both lists keep the input order.
pub fn split_train_test(cases: &[String], seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if cases.len() < 2 {
        return Err(ItlError::Config(format!(
            "need at least 2 cases to split, got {}",
            cases.len()
        )));
    }
    let n_test = ((cases.len() as f64 / 5.0).round() as usize).max(1);
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; cases.len()];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (c, t) in cases.iter().zip(is_test) {
        if t {
            test.push(c.clone());
        } else {
            train.push(c.clone());
        }
    }
    Ok((train, test))
}
