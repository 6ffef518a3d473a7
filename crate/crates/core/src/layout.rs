//! Token geometry of a 3D full-attention sequence.
//!
//! Video tokens come first, flattened frame-major (`frame, row, col`), and the
//! text tokens follow them: positions `[0, f·h·w)` are video and
//! `[f·h·w, L)` are text.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "LayoutFields", into = "LayoutFields")]
pub struct SequenceLayout {
    frames: usize,
    height: usize,
    width: usize,
    text: usize,
}

impl SequenceLayout {
    pub fn new(frames: usize, height: usize, width: usize, text: usize) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidLayout(format!(
                "frames, height and width must be positive (got f={frames}, h={height}, w={width})"
            )));
        }
        frames
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .and_then(|v| v.checked_add(text))
            .ok_or_else(|| Error::InvalidLayout("sequence length overflows usize".into()))?;
        Ok(Self {
            frames,
            height,
            width,
            text,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn text(&self) -> usize {
        self.text
    }

    /// Tokens per latent frame (`h·w`).
    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    /// Number of video tokens, which is also the index of the first text token.
    pub fn video_len(&self) -> usize {
        self.frames * self.frame_len()
    }

    /// Total sequence length `L = f·h·w + t`.
    pub fn len(&self) -> usize {
        self.video_len() + self.text
    }

    /// Always false; a layout holds at least one video token.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn text_range(&self) -> Range<usize> {
        self.video_len()..self.len()
    }

    pub fn frame_range(&self, frame: usize) -> Range<usize> {
        let start = frame * self.frame_len();
        start..start + self.frame_len()
    }

    /// Frame index of a video token, `None` for text tokens.
    pub fn frame_of(&self, token: usize) -> Option<usize> {
        (token < self.video_len()).then(|| token / self.frame_len())
    }

    pub fn is_text(&self, token: usize) -> bool {
        token >= self.video_len() && token < self.len()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutFields {
    frames: usize,
    height: usize,
    width: usize,
    #[serde(default)]
    text: usize,
}

impl TryFrom<LayoutFields> for SequenceLayout {
    type Error = Error;

    fn try_from(f: LayoutFields) -> Result<Self> {
        SequenceLayout::new(f.frames, f.height, f.width, f.text)
    }
}

impl From<SequenceLayout> for LayoutFields {
    fn from(l: SequenceLayout) -> Self {
        LayoutFields {
            frames: l.frames,
            height: l.height,
            width: l.width,
            text: l.text,
        }
    }
}

/// Shorthand for [`SequenceLayout::new`].
pub fn make_layout(frames: usize, height: usize, width: usize, text: usize) -> Result<SequenceLayout> {
    SequenceLayout::new(frames, height, width, text)
}

/// Splits a token index into `(block, offset)` for block size `block_size`.
pub fn block_index_of(token: usize, block_size: usize, len: usize) -> Result<(usize, usize)> {
    if block_size == 0 {
        return Err(Error::InvalidArgument("block size must be positive".into()));
    }
    if token >= len {
        return Err(Error::IndexOutOfRange { index: token, len });
    }
    Ok((token / block_size, token % block_size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn large_video_layout() {
        let l = make_layout(13, 45, 80, 224).unwrap();
        assert_eq!(l.len(), 47_024);
        assert_eq!(l.video_len(), 46_800);
    }

    #[test]
    fn minimal_layout() {
        let l = make_layout(1, 1, 1, 0).unwrap();
        assert_eq!(l.len(), 1);
        assert!(l.text_range().is_empty());
    }

    #[test]
    fn text_boundary() {
        let l = make_layout(2, 4, 4, 8).unwrap();
        assert_eq!(l.len(), 40);
        assert_eq!(l.video_len(), 32);
        assert_eq!(l.text_range(), 32..40);
        assert!(l.is_text(32));
        assert!(!l.is_text(31));
        assert_eq!(l.frame_of(17), Some(1));
        assert_eq!(l.frame_of(35), None);
    }

    #[test]
    fn rejects_zero_dims() {
        assert!(make_layout(0, 1, 1, 4).is_err());
        assert!(make_layout(1, 0, 1, 4).is_err());
        assert!(make_layout(1, 1, 0, 0).is_err());
    }

    #[test]
    fn block_index_examples() {
        assert_eq!(block_index_of(0, 64, 100).unwrap(), (0, 0));
        assert_eq!(block_index_of(63, 64, 100).unwrap(), (0, 63));
        assert_eq!(block_index_of(64, 64, 100).unwrap(), (1, 0));
        assert!(matches!(
            block_index_of(100, 64, 100),
            Err(Error::IndexOutOfRange { index: 100, len: 100 })
        ));
        assert!(block_index_of(0, 0, 100).is_err());
    }

    proptest! {
        #[test]
        fn block_index_round_trip(len in 1usize..5000, b in 1usize..200, frac in 0.0f64..1.0) {
            let token = ((len as f64) * frac) as usize % len;
            let (blk, off) = block_index_of(token, b, len).unwrap();
            prop_assert!(off < b);
            prop_assert_eq!(blk * b + off, token);
        }

        #[test]
        fn length_identity(f in 1usize..20, h in 1usize..20, w in 1usize..20, t in 0usize..50) {
            let l = make_layout(f, h, w, t).unwrap();
            prop_assert_eq!(l.len(), f * h * w + t);
            prop_assert_eq!(l.text_range().len(), t);
        }
    }
}
