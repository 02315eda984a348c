//! Fixtures shared by the benchmarks.

use voxcl_core::config::RunConfig;
use voxcl_core::phantom::{generate_phantom, PhantomSpec};
use voxcl_core::train::Sample;

/// `count` default-size phantoms, preprocessed for `run`.
pub fn phantom_samples(run: &RunConfig, count: u64) -> Vec<Sample> {
    let spec = PhantomSpec::default();
    (0..count)
        .map(|i| {
            let lv = generate_phantom(&spec, i).expect("default phantom spec places its organs");
            Sample::prepare(format!("bench{i}"), &lv.volume, Some(&lv.labels), &run.preprocess, &run.pretrain.patch)
                .expect("phantoms have a body")
        })
        .collect()
}
