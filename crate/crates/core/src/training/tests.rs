use super::*;
use crate::model::ModelConfig;

#[test]
fn grad_check_full_loss() {
    let w = Weights { prop: 1.0, qa: 1.0, gen: 0.1 };
    let r = grad_check(&ModelConfig::tiny(), w, Mode::SingleRead, 6);
    for t in &r.tensors {
        println!("{:40} {:3} rel {:.2e} abs {:.2e}", t.name, t.entries, t.max_rel_err, t.max_abs_err);
    }
    assert!(r.max_rel_err < 1e-4, "{:?}", r.worst());
}
