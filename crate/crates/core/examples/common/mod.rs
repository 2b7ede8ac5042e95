//! Run configuration shared by the training examples: a reduced setup that
//! finishes in about a minute, or the desk defaults with `--full`.
use hfr_adapt::cli::config::RunConfig;

pub fn config() -> RunConfig {
    let mut cfg = RunConfig::default();
    if std::env::args().any(|a| a == "--full") {
        return cfg;
    }
    cfg.data.n_ids = 40;
    cfg.data.samples_per_id = 6;
    cfg.pretrain.n_ids = 80;
    cfg.pretrain.epochs = 2;
    cfg.train.epochs = 4;
    cfg.train.lr = 3e-4;
    cfg.eval.n_folds = 1;
    cfg
}
