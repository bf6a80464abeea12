#![allow(dead_code)]

use milbag::config::{Config, CvConfig};
use milbag_core::data::DatasetSpec;
use milbag_core::milnet::MilConfig;

/// A configuration that trains in well under a second per fold.
pub fn tiny_config() -> Config {
    let mut c = Config::synthetic();
    c.train.epochs = 4;
    c.train.aug_start_epoch = 2;
    c.train.model = MilConfig::reduced();
    c.train.ssl.hidden_width = 4;
    c.data = DatasetSpec {
        n_positive: 4,
        n_negative: 8,
        slices_per_bag: 1,
        ..DatasetSpec::default()
    };
    c.cv = CvConfig {
        folds: 3,
        repeats: 2,
        seed: 5,
    };
    c
}

/// `key.path=value` overrides that turn the synthetic preset into
/// [`tiny_config`].
pub const TINY_OVERRIDES: &[&str] = &[
    "train.epochs=4",
    "train.aug_start_epoch=2",
    "train.model.channels=[2, 2, 3]",
    "train.model.feature_dim=8",
    "train.model.attention_dim=4",
    "train.ssl.hidden_width=4",
    "data.n_positive=4",
    "data.n_negative=8",
    "data.slices_per_bag=1",
    "cv.folds=3",
    "cv.repeats=2",
    "cv.seed=5",
];
