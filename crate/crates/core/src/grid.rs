/// Row-major boolean grid (foreground masks, erase masks, components).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolGrid {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<bool>,
}

impl BoolGrid {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut cells = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                cells.push(f(r, c));
            }
        }
        Self { height, width, cells }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.cells[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// True when every set cell of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BoolGrid) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.cells.iter().zip(&other.cells).all(|(&a, &b)| !a || b)
    }
}
