mod common;

use common::random_grad_case;
use mpcl_core::grad::{finite_diff_check, LossOptions};
use mpcl_core::{BnMode, KLWeights, KlMode, PriorStore};

fn check(seed: u64, opts: LossOptions) {
    let case = random_grad_case(seed);
    let l = case.model.layout();
    let prior = PriorStore::standard_normal(l);
    let weights = KLWeights::uniform(l.total, 1e-2);
    let r = finite_diff_check(
        &case.model,
        &case.batch,
        &prior,
        &weights,
        &opts,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(
        r.failures.is_empty(),
        "{}\n{:?}",
        case.description,
        &r.failures[..r.failures.len().min(5)]
    );
    assert!(r.checked >= 2 * l.total);
}

#[test]
fn random_architectures_train_mode() {
    for seed in 0..6 {
        check(seed, LossOptions::default());
    }
}

#[test]
fn random_architectures_as_printed_kl() {
    for seed in 6..9 {
        check(
            seed,
            LossOptions {
                kl_mode: KlMode::AsPrinted,
                bn_mode: BnMode::Train,
            },
        );
    }
}
