use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::stream_rng;

pub const VAL_FRACTION: f64 = 0.15;
pub const TEST_FRACTION: f64 = 0.15;

/// Disjoint, exhaustive train/validation/test partition of video ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle followed by a 70/15/15 partition. Validation and test get
/// `max(1, floor(0.15 n))` ids each; the remainder goes to training.
pub fn make_split(ids: &[String], seed: u64) -> Result<DatasetSplit> {
    if ids.len() < 3 {
        return Err(Error::InvalidConfig(format!("need at least 3 ids to split, got {}", ids.len())));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut stream_rng(seed, "split", 0));
    let n = ids.len();
    let n_val = ((n as f64 * VAL_FRACTION).floor() as usize).max(1);
    let n_test = ((n as f64 * TEST_FRACTION).floor() as usize).max(1);
    let test = shuffled.split_off(n - n_test);
    let val = shuffled.split_off(n - n_test - n_val);
    Ok(DatasetSplit {
        train: shuffled,
        val,
        test,
    })
}
