use serde::{Deserialize, Serialize};

use super::{DataError, FlowDataset, CHANNELS};
use crate::autodiff::Tensor;

/// Sliding-window geometry: `input_len` observed steps predict the next
/// `output_len` steps; consecutive windows start `stride` rows apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    #[serde(default = "default_len")]
    pub input_len: usize,
    #[serde(default = "default_len")]
    pub output_len: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_len() -> usize {
    12
}

fn default_stride() -> usize {
    1
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            input_len: 12,
            output_len: 12,
            stride: 1,
        }
    }
}

impl WindowSpec {
    pub fn span(&self) -> usize {
        self.input_len + self.output_len
    }
}

/// One training/evaluation example on the original scale.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    /// `[input_len × N × 2]`
    pub x: Tensor,
    /// `[output_len × N × 2]`, the rows immediately after `x`.
    pub y: Tensor,
    /// Row index of the first input step.
    pub t_origin: usize,
}

impl SampleWindow {
    pub fn input_len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn output_len(&self) -> usize {
        self.y.shape()[0]
    }

    /// Row index of the first target step.
    pub fn target_start(&self) -> usize {
        self.t_origin + self.input_len()
    }

    /// One past the last row the window touches.
    pub fn end(&self) -> usize {
        self.target_start() + self.output_len()
    }
}

/// Windows at origins `0, stride, 2·stride, …`; there are
/// `floor((T_total − T − m) / stride) + 1` of them.
pub fn make_windows(dataset: &FlowDataset, spec: WindowSpec) -> Result<Vec<SampleWindow>, DataError> {
    let WindowSpec {
        input_len,
        output_len,
        stride,
    } = spec;
    if input_len == 0 || output_len == 0 || stride == 0 {
        return Err(DataError::InfeasibleWindows(format!(
            "lengths and stride must be positive, got T={input_len}, m={output_len}, stride={stride}"
        )));
    }
    let total = dataset.num_steps();
    if total < spec.span() {
        return Err(DataError::InfeasibleWindows(format!(
            "{total} rows cannot hold T={input_len} plus m={output_len}"
        )));
    }
    let n = dataset.num_stations();
    let count = (total - spec.span()) / stride + 1;
    Ok((0..count)
        .map(|w| {
            let origin = w * stride;
            let split = origin + input_len;
            let x = Tensor::new(vec![input_len, n, CHANNELS], dataset.rows(origin, split).to_vec());
            let y = Tensor::new(
                vec![output_len, n, CHANNELS],
                dataset.rows(split, split + output_len).to_vec(),
            );
            SampleWindow {
                x: x.expect("sized from dataset"),
                y: y.expect("sized from dataset"),
                t_origin: origin,
            }
        })
        .collect())
}
