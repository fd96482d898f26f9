use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Shape of the latent video: `frames × height × width` tokens, flattened
/// frame-major then row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl TokenGrid {
    pub fn new(frames: usize, height: usize, width: usize) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return config_err(format!("token grid {frames}x{height}x{width} must be non-empty"));
        }
        Ok(Self { frames, height, width })
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.height * self.width
    }

    /// `(frame, row, col)` of a flat token index.
    pub fn coords(&self, token: usize) -> (usize, usize, usize) {
        let per = self.tokens_per_frame();
        let rem = token % per;
        (token / per, rem / self.width, rem % self.width)
    }

    pub fn index(&self, frame: usize, row: usize, col: usize) -> usize {
        (frame * self.height + row) * self.width + col
    }
}
