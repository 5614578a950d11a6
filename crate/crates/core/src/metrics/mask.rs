use crate::error::{Error, Result};

/// Binary label map: 0 = background, 1 = break-up.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SegMask {
    h: usize,
    w: usize,
    labels: Vec<u8>,
}

impl SegMask {
    pub fn new(h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::shape(format!(
                "{} labels cannot fill a {h}x{w} mask",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::format(format!("mask label {bad} is not 0 or 1")));
        }
        Ok(SegMask { h, w, labels })
    }

    /// Caller guarantees `labels.len() == h * w`; labels are not range-checked.
    pub(crate) fn from_labels_unchecked(h: usize, w: usize, labels: Vec<u8>) -> Self {
        debug_assert_eq!(labels.len(), h * w);
        SegMask { h, w, labels }
    }

    pub fn empty(h: usize, w: usize) -> Self {
        SegMask {
            h,
            w,
            labels: vec![0; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut labels = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                labels.push(f(y, x) as u8);
            }
        }
        SegMask { h, w, labels }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.labels[y * self.w + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.labels[y * self.w + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.iter().all(|&l| l == 0)
    }

    pub(crate) fn check_same_shape(&self, other: &SegMask) -> Result<()> {
        if (self.h, self.w) != (other.h, other.w) {
            return Err(Error::shape(format!(
                "mask sizes differ: {}x{} vs {}x{}",
                self.h, self.w, other.h, other.w
            )));
        }
        Ok(())
    }
}
