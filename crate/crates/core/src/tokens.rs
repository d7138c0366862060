use crate::error::{Error, Result};

/// A `h x w` grid of `c`-channel token vectors, row-major over positions with
/// channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::Shape(format!(
                "{} values for a {h}x{w}x{c} token grid",
                data.len()
            )));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c, data: vec![0.0; h * w * c] }
    }

    /// Number of token positions.
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn token(&self, i: usize) -> &[f64] {
        &self.data[i * self.c..(i + 1) * self.c]
    }

    #[inline]
    pub fn token_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.c..(i + 1) * self.c]
    }

    pub fn same_shape(&self, other: &TokenGrid) -> bool {
        self.h == other.h && self.w == other.w && self.c == other.c
    }

    pub fn check_shape(&self, other: &TokenGrid, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.h, self.w, self.c, other.h, other.w, other.c
            )))
        }
    }
}
