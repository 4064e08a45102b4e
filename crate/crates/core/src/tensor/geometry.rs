//! Convolution output-size arithmetic shared by every conv and pooling layer.

use crate::error::{Error, Result};

/// One-axis convolution geometry: input extent, filter extent, asymmetric
/// padding, and stride, plus the derived output extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: usize,
    pub filter: usize,
    pub pad_start: usize,
    pub pad_end: usize,
    pub stride: usize,
    pub output: usize,
}

impl ConvGeometry {
    pub fn new(
        input: usize,
        filter: usize,
        pad_start: usize,
        pad_end: usize,
        stride: usize,
    ) -> Result<Self> {
        let output = conv_output_extent(input, filter, pad_start, pad_end, stride)?;
        Ok(ConvGeometry {
            input,
            filter,
            pad_start,
            pad_end,
            stride,
            output,
        })
    }

    /// Geometry for "same" padding at the given stride: output extent is
    /// ceil(input/stride) and any odd total padding goes to the end.
    pub fn same(input: usize, filter: usize, stride: usize) -> Result<Self> {
        let output = input.div_ceil(stride);
        let needed = (output - 1) * stride + filter;
        let total = needed.saturating_sub(input);
        let pad_start = total / 2;
        let pad_end = total - pad_start;
        Self::new(input, filter, pad_start, pad_end, stride)
    }

    /// Geometry with no padding.
    pub fn valid(input: usize, filter: usize, stride: usize) -> Result<Self> {
        Self::new(input, filter, 0, 0, stride)
    }
}

/// O = floor((I - F + P_start + P_end) / S) + 1, the number of valid filter
/// placements along one axis.
pub fn conv_output_extent(
    input: usize,
    filter: usize,
    pad_start: usize,
    pad_end: usize,
    stride: usize,
) -> Result<usize> {
    if input == 0 || filter == 0 || stride == 0 {
        return Err(Error::InvalidGeometry(format!(
            "extents must be positive: I={input}, F={filter}, S={stride}"
        )));
    }
    let padded = input + pad_start + pad_end;
    if padded < filter {
        return Err(Error::InvalidGeometry(format!(
            "padded input {padded} smaller than filter {filter}"
        )));
    }
    Ok((padded - filter) / stride + 1)
}
