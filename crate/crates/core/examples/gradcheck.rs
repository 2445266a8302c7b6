//! Finite-difference checks of every differentiable op and of a full model loss.

use qformer::gradcheck::{self, CheckReport};

fn print(r: &CheckReport) {
    let mark = if r.passed { "ok " } else { "BAD" };
    println!("{mark} {:<36} rel err {:9.2e}  tol {:.0e}  ({} entries)", r.name, r.worst_rel_err, r.tolerance, r.checked);
}

fn main() -> qformer::Result<()> {
    let target = std::env::args().nth(1);
    let ops = gradcheck::check_ops(target.as_deref(), 0)?;
    ops.iter().for_each(print);
    if target.is_none() {
        gradcheck::check_model(gradcheck::model_check_config(), 0, 5)?.iter().for_each(print);
    }
    Ok(())
}
