//! Fixtures shared by the kernel benchmarks.

use mpcl_core::grad::Batch;
use mpcl_core::{Architecture, MPModel, SeededRng, Tensor};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SeededRng::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("shape matches data")
}

/// A two-task MLP on flat `input` features and a matching batch.
pub fn mlp_fixture(input: usize, hidden: &[usize], batch: usize) -> (MPModel, Batch) {
    let arch = Architecture::mlp(&[input], hidden, &[5, 5]);
    let model = MPModel::new(arch, -10.0, &mut SeededRng::new(1)).expect("valid architecture");
    let labels = (0..batch).map(|i| i % 5).collect();
    let tasks = (0..batch).map(|i| i % 2).collect();
    let b = Batch::new(random_tensor(&[batch, input], 2), labels, tasks).expect("valid batch");
    (model, b)
}
