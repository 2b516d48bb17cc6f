//! Finite-difference check of the three training losses on a tiny model.

use finegrain::model::ModelDims;
use finegrain::trainer::{grad_check, LossName};

fn main() -> finegrain::Result<()> {
    let dims = ModelDims::tiny();
    for loss in LossName::ALL {
        let start = std::time::Instant::now();
        let r = grad_check(loss, &dims, 7)?;
        println!(
            "{:<5} max rel err {:.3e} over {} scalars (worst: {}) in {:.1?}",
            loss.to_string(),
            r.max_rel_error,
            r.scalars,
            r.worst_block,
            start.elapsed()
        );
    }
    Ok(())
}
