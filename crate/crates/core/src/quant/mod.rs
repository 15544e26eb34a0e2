//! Simulated uniform quantization: fake-quant ops with straight-through
//! gradients, `#w#a` plans and chunked activation-range calibration.
//!
//! Weights use symmetric per-output-channel scales recomputed from the fp32
//! master weights on every forward; activations use affine per-tensor
//! parameters fixed by calibration. Batch-norm layers stay in full precision.

mod calib;
mod fake;
mod spec;

pub use calib::{RangeEstimator, CHUNK_SIZE, MOMENTUM};
pub use fake::{fake_quant_tensor, signed_range, unsigned_range, QuantParams};
pub use spec::{LayerOverride, QuantSpec, QuantState};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datasets::{standard_augment, Dataset};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::tensor::{Element, Graph};

/// Pixels of zero padding used by calibration-time random crops.
pub const CALIB_PAD: usize = 4;

/// Attaches quantizers to a copy of `model` and calibrates activation ranges
/// with `spec.calib_steps` eval-mode passes over augmented batches of
/// `spec.calib_batch` samples drawn with replacement. During calibration
/// weights are quantized and activations stay in full precision.
pub fn quantize_model<E: Element>(
    model: &Model<E>,
    spec: &QuantSpec,
    calib_data: &Dataset,
    seed: u64,
) -> Result<Model<E>> {
    if calib_data.is_empty() {
        return Err(Error::Data("calibration data is empty".into()));
    }
    let mut student = model.clone();
    student.set_quant(Some(QuantState::new(
        spec.clone(),
        model.quant_layer_names(),
    )?));
    if spec.calib_steps * spec.calib_batch < CHUNK_SIZE {
        return Err(Error::config(format!(
            "calibration sees {} samples; at least one chunk of {CHUNK_SIZE} is needed",
            spec.calib_steps * spec.calib_batch
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..spec.calib_steps {
        let idx = calib_data.sample_indices(spec.calib_batch, &mut rng);
        let batch = standard_augment(&calib_data.images::<E>(&idx), CALIB_PAD, true, &mut rng)?;
        let g = Graph::new();
        let params = student.bind(&g, false);
        let x = g.constant(batch);
        let opts = ForwardOptions {
            calibrate: true,
            ..ForwardOptions::eval()
        };
        student.forward_mut(&params, x, opts)?;
    }
    student.quant_mut().expect("attached above").finalize()?;
    Ok(student)
}

/// Makes the calibrated activation ranges read-only for fine-tuning.
pub fn freeze_activation_ranges<E: Element>(student: &mut Model<E>) -> Result<()> {
    student
        .quant_mut()
        .ok_or_else(|| Error::usage("model is not quantized"))?
        .freeze()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{make_procedural, Split};
    use crate::model::ArchSpec;

    #[test]
    fn calibrates_every_layer() {
        let data = make_procedural(10, 4, 0, Split::Train).unwrap();
        let m = Model::<f32>::build(&ArchSpec::desk(), 0).unwrap();
        let spec = QuantSpec {
            calib_steps: 2,
            calib_batch: 16,
            ..QuantSpec::new(8, 8)
        };
        let mut q = quantize_model(&m, &spec, &data, 0).unwrap();
        let state = q.quant().unwrap();
        assert!(state.is_calibrated());
        assert!(state.layers.iter().all(|l| l.estimator.chunks_seen() == 2));
        // weights themselves stay fp32 masters
        assert!(q.same_state(&m));
        freeze_activation_ranges(&mut q).unwrap();
        assert!(q.quant().unwrap().is_frozen());
    }

    #[test]
    fn overrides_must_name_layers() {
        let data = make_procedural(10, 2, 0, Split::Train).unwrap();
        let m = Model::<f32>::build(&ArchSpec::desk(), 0).unwrap();
        let spec = QuantSpec::new(4, 4).with_override("conv9", 8, 8);
        assert!(matches!(
            quantize_model(&m, &spec, &data, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn freeze_requires_calibration() {
        let mut m = Model::<f32>::build(&ArchSpec::desk(), 0).unwrap();
        assert!(freeze_activation_ranges(&mut m).is_err());
    }
}
