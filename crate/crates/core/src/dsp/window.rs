use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Analysis window coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    coefficients: Vec<f64>,
}

impl Window {
    pub fn from_coefficients(coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.is_empty() {
            return Err(Error::invalid("window must have at least one coefficient"));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("window coefficients must be finite"));
        }
        Ok(Self { coefficients })
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }
}

/// Periodic (DFT-even) Hamming window: `0.54 - 0.46 cos(2πn/W)`.
pub fn hamming_window(len: usize) -> Result<Window> {
    if len < 2 {
        return Err(Error::invalid(format!(
            "hamming window needs length >= 2, got {len}"
        )));
    }
    let coefficients = (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect();
    Ok(Window { coefficients })
}

pub fn rectangular_window(len: usize) -> Result<Window> {
    Window::from_coefficients(vec![1.0; len])
}
