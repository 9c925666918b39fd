mod common;

use common::{all_variants, compare_gradients, micro_batch, micro_model};

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let batch = micro_batch();
    let params = micro_model(11);
    for config in all_variants() {
        let cmp = compare_gradients(&config, &params, &batch, 1e-5);
        let mut sorted = cmp.relative_errors.clone();
        sorted.sort_by(f64::total_cmp);
        let p99 = sorted[sorted.len() * 99 / 100];
        println!("{:<14} params {} p99 {:.2e} worst {:.2e}", cmp.name, sorted.len(), p99, cmp.worst());
        assert!(cmp.fraction_below(1e-5) >= 0.99, "{}", cmp.name);
        assert!(cmp.worst() < 1e-4, "{}: worst {}", cmp.name, cmp.worst());
    }
}
