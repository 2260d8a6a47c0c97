use crate::scalar::Scalar;

/// Binary `height×width` grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    /// Panics if `data.len() != height·width`.
    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), height * width, "mask size");
        Self { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn intersection(&self, other: &Self) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count()
    }

    pub fn union_area(&self, other: &Self) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a || **b).count()
    }

    /// Intersection over union; two empty masks have IoU 0.
    pub fn iou(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "iou shape");
        let u = self.union_area(other);
        if u == 0 {
            0.0
        } else {
            self.intersection(other) as f64 / u as f64
        }
    }

    pub fn union(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape(), "union shape");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect();
        Self::from_vec(self.height, self.width, data)
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }

    /// Nearest-neighbour resampling (pixel centres).
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let rows: Vec<usize> = (0..height).map(|i| nearest_source(i, height, self.height)).collect();
        let cols: Vec<usize> = (0..width).map(|j| nearest_source(j, width, self.width)).collect();
        Self::from_fn(height, width, |r, c| self.get(rows[r], cols[c]))
    }

    /// 0/1 values.
    pub fn to_values<T: Scalar>(&self) -> Vec<T> {
        self.data.iter().map(|&b| if b { T::one() } else { T::zero() }).collect()
    }

    pub fn pixels(&self) -> impl Iterator<Item = usize> + '_ {
        self.data.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }
}

/// Source index for output index `i` when resampling `n_src` → `n_out`.
pub fn nearest_source(i: usize, n_out: usize, n_src: usize) -> usize {
    (((i as f64 + 0.5) * n_src as f64 / n_out as f64).floor() as usize).min(n_src - 1)
}

/// Ordered instance masks of one frame, optionally scored.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub height: usize,
    pub width: usize,
    pub frame_id: u64,
    pub masks: Vec<Mask>,
    pub scores: Option<Vec<f64>>,
}

impl MaskSet {
    pub fn empty(height: usize, width: usize, frame_id: u64) -> Self {
        Self {
            height,
            width,
            frame_id,
            masks: Vec::new(),
            scores: None,
        }
    }

    /// Panics if any mask has a different shape.
    pub fn new(height: usize, width: usize, frame_id: u64, masks: Vec<Mask>) -> Self {
        assert!(masks.iter().all(|m| m.shape() == (height, width)), "mask set shape");
        Self {
            height,
            width,
            frame_id,
            masks,
            scores: None,
        }
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Pixelwise union of all masks.
    pub fn covered(&self) -> Mask {
        let mut out = Mask::new(self.height, self.width);
        for m in &self.masks {
            for i in m.pixels() {
                out.data[i] = true;
            }
        }
        out
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            frame_id: self.frame_id,
            masks: self.masks.iter().map(|m| m.resize_nearest(height, width)).collect(),
            scores: self.scores.clone(),
        }
    }
}

/// Per-pixel instance labels; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    /// Instance `i` gets label `i + 1`; where masks overlap the earlier one wins.
    pub fn from_masks(set: &MaskSet) -> Self {
        let mut g = Self::new(set.height, set.width);
        for (i, m) in set.masks.iter().enumerate().rev() {
            for p in m.pixels() {
                g.labels[p] = (i + 1) as u16;
            }
        }
        g
    }

    /// One mask per distinct nonzero label, in increasing label order.
    pub fn to_masks(&self, frame_id: u64) -> MaskSet {
        let mut ids: Vec<u16> = self.labels.iter().copied().filter(|&l| l > 0).collect();
        ids.sort_unstable();
        ids.dedup();
        let masks = ids
            .iter()
            .map(|&id| Mask::from_vec(self.height, self.width, self.labels.iter().map(|&l| l == id).collect()))
            .collect();
        MaskSet::new(self.height, self.width, frame_id, masks)
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let rows: Vec<usize> = (0..height).map(|i| nearest_source(i, height, self.height)).collect();
        let cols: Vec<usize> = (0..width).map(|j| nearest_source(j, width, self.width)).collect();
        let mut labels = Vec::with_capacity(height * width);
        for &r in &rows {
            for &c in &cols {
                labels.push(self.labels[r * self.width + c]);
            }
        }
        Self { height, width, labels }
    }
}
