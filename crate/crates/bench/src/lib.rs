//! Shared fixtures for the benchmarks.

use saliency_audit::model::{synth_dataset, AnyModel, Architecture, ConvNet, SynthConfig};
use saliency_audit::tensor::Dataset;

/// Default-sized synthetic images and an untrained CNN over them. Timing
/// does not depend on the weights.
pub fn fixture(samples: usize) -> (AnyModel, Dataset) {
    let data = synth_dataset(&SynthConfig {
        samples,
        seed: 3,
        ..SynthConfig::default()
    })
    .expect("default synthetic config is valid");
    let dims = data.dims().expect("nonempty");
    let arch = Architecture::new(dims, Architecture::default_blocks(), data.num_classes())
        .expect("valid architecture");
    let net = ConvNet::init(arch, 5).expect("initialized network");
    (AnyModel::Conv(net), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use saliency_audit::model::Classifier;

    #[test]
    fn fixture_matches_data() {
        let (model, data) = fixture(4);
        assert_eq!(data.len(), 4);
        assert_eq!(Some(model.input_dims()), data.dims());
    }
}
