use super::network::{Architecture, LayerSpec, ModelParams};
use super::ModelError;

/// Width in Da an isotopic envelope spans and the conv stack has to see at once.
pub const ENVELOPE_SPAN_DA: f64 = 5.0;
pub const MIN_INPUT_LEN: usize = 256;
const LOCAL_STRIDE: usize = 8;

/// Scaled-down IsotopeNet layout:
/// scale(n) → conv(8) → ReLU → conv(4) → ReLU → locally-connected(4, stride 8) → ReLU → dense(C).
///
/// The leading scale turns a unit-TIC spectrum into one with mean intensity
/// 1 per bin, which suits the fan-in initialization.
///
/// Both conv widths are the smallest odd width whose stacked receptive field
/// covers [`ENVELOPE_SPAN_DA`] at the given bin width.
pub fn isotopenet_lite_arch(input_len: usize, classes: usize, bin_width: f64) -> Result<Architecture, ModelError> {
    if !(bin_width > 0.0) || !bin_width.is_finite() {
        return Err(ModelError::Architecture(format!("bin width {bin_width} must be positive")));
    }
    if input_len < MIN_INPUT_LEN {
        return Err(ModelError::Architecture(format!(
            "input length {input_len} is below the minimum {MIN_INPUT_LEN}"
        )));
    }
    let target = (ENVELOPE_SPAN_DA / bin_width).ceil() as usize;
    // two stacked convs of width w see 2w - 1 bins
    let mut width = target.div_ceil(2).max(1);
    if 2 * width - 1 < target {
        width += 1;
    }
    if width % 2 == 0 {
        width += 1;
    }
    if 2 * width - 1 > input_len {
        return Err(ModelError::Architecture(format!(
            "receptive field of {} bins exceeds input length {input_len}",
            2 * width - 1
        )));
    }
    let arch = Architecture {
        input_len,
        classes,
        layers: vec![
            LayerSpec::Scale {
                factor: input_len as f64,
            },
            LayerSpec::Conv { filters: 8, width },
            LayerSpec::Relu,
            LayerSpec::Conv { filters: 4, width },
            LayerSpec::Relu,
            LayerSpec::LocallyConnected {
                filters: 4,
                width: LOCAL_STRIDE,
                stride: LOCAL_STRIDE,
            },
            LayerSpec::Relu,
            LayerSpec::Dense { units: classes },
        ],
    };
    arch.validate()?;
    Ok(arch)
}

pub fn build_isotopenet_lite(
    input_len: usize,
    classes: usize,
    bin_width: f64,
    seed: u64,
) -> Result<ModelParams, ModelError> {
    ModelParams::init(isotopenet_lite_arch(input_len, classes, bin_width)?, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn receptive_field_covers_envelope_at_desk_scale() {
        let arch = isotopenet_lite_arch(2000, 2, 0.6).unwrap();
        assert!(arch.conv_receptive_field() >= 9);
        assert!(arch.relu_only());
    }

    #[test]
    fn output_layer_has_class_count_units() {
        let arch = isotopenet_lite_arch(2000, 2, 0.6).unwrap();
        assert_eq!(arch.layers.last(), Some(&LayerSpec::Dense { units: 2 }));
    }

    #[test]
    fn zero_spectrum_gives_finite_logits() {
        let model = build_isotopenet_lite(512, 3, 0.6, 1).unwrap();
        let z = model.predict_logits(&vec![0.0; 512]).unwrap();
        assert_eq!(z.len(), 3);
        assert!(z.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_short_inputs_and_bad_bins() {
        assert!(isotopenet_lite_arch(100, 2, 0.6).is_err());
        assert!(isotopenet_lite_arch(2000, 2, 0.0).is_err());
        // a 0.01 Da bin needs a 500-bin receptive field
        assert!(isotopenet_lite_arch(300, 2, 0.01).is_err());
    }

    #[test]
    fn coarse_bins_still_get_a_valid_width() {
        for bw in [0.1, 0.33, 0.6, 1.0, 2.5, 10.0] {
            let arch = isotopenet_lite_arch(2000, 2, bw).unwrap();
            let rf = arch.conv_receptive_field() as f64;
            assert!(rf * bw >= ENVELOPE_SPAN_DA || rf >= (ENVELOPE_SPAN_DA / bw).ceil(), "bin {bw}");
        }
    }
}
