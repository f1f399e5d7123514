use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{VisualEncoderSpec, VisualInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    /// Image channel the color is drawn on.
    pub fn plane(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Cross];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Cross => "cross",
        }
    }

    /// Whether pixel `(y, x)` of a `p x p` cell is inked.
    fn covers(self, y: usize, x: usize, p: usize) -> bool {
        let last = p - 1;
        match self {
            Shape::Square => y == 0 || y == last || x == 0 || x == last,
            Shape::Circle => {
                let corner = (y == 0 || y == last) && (x == 0 || x == last);
                let edge = y == 0 || y == last || x == 0 || x == last;
                edge && !corner
            }
            Shape::Cross => x == y || x + y == last,
        }
    }
}

/// Content of one grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Object {
    pub color: Color,
    pub shape: Shape,
}

/// Cell codes: `None` is empty, otherwise a colored shape.
pub type Cell = Option<Object>;

/// All non-empty cell codes in canonical order.
pub fn all_objects() -> Vec<Object> {
    Color::ALL
        .iter()
        .flat_map(|&color| Shape::ALL.iter().map(move |&shape| Object { color, shape }))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub rows: usize,
    pub cols: usize,
    /// Probability in thousandths that a cell holds an object.
    pub fill_permille: u32,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            rows: 3,
            cols: 3,
            fill_permille: 400,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.fill_permille > 1000 {
            return Err(Error::Config(format!("invalid grid {self:?}")));
        }
        Ok(())
    }
}

/// A grid of cells; rendered to pixels on demand.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyImage {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<Cell>,
}

impl ToyImage {
    pub fn cell(&self, r: usize, c: usize) -> Cell {
        self.cells[r * self.cols + c]
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.len() != self.rows * self.cols {
            return Err(Error::Contract("cell count does not match grid".into()));
        }
        Ok(())
    }

    /// One cell per `cell_px x cell_px` block, black background.
    pub fn render(&self, spec: &VisualEncoderSpec) -> Result<VisualInput> {
        self.validate()?;
        if !spec.image_height.is_multiple_of(self.rows) || !spec.image_width.is_multiple_of(self.cols) || spec.channels != Color::ALL.len() {
            return Err(Error::dim(
                "render",
                &[self.rows, self.cols],
                &[spec.image_height, spec.image_width, spec.channels],
            ));
        }
        let (ch, cw) = (spec.image_height / self.rows, spec.image_width / self.cols);
        if ch != cw || ch < 2 {
            return Err(Error::Config("cells must be square and at least 2 pixels".into()));
        }
        let w = spec.image_width;
        let nc = spec.channels;
        let mut px = alloc::vec![0.0; spec.image_height * w * nc];
        for r in 0..self.rows {
            for c in 0..self.cols {
                let Some(obj) = self.cell(r, c) else { continue };
                let plane = obj.color.plane();
                for y in 0..ch {
                    for x in 0..cw {
                        if obj.shape.covers(y, x, ch) {
                            let off = ((r * ch + y) * w + c * cw + x) * nc;
                            px[off + plane] = 1.0;
                        }
                    }
                }
            }
        }
        Ok(VisualInput(Tensor::new(
            alloc::vec![spec.image_height, spec.image_width, nc],
            px,
        )?))
    }
}

/// Ground truth derived from a grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Facts {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<Cell>,
    /// Objects per color, in [`Color::ALL`] order.
    pub color_counts: [usize; 4],
    /// Objects per code, in [`all_objects`] order.
    pub object_counts: Vec<usize>,
}

impl Facts {
    pub fn from_image(img: &ToyImage) -> Self {
        let objects = all_objects();
        let mut color_counts = [0; 4];
        let mut object_counts = alloc::vec![0; objects.len()];
        for obj in img.cells.iter().flatten() {
            color_counts[obj.color as usize] += 1;
            object_counts[obj.color as usize * Shape::ALL.len() + obj.shape as usize] += 1;
        }
        Self {
            rows: img.rows,
            cols: img.cols,
            cells: img.cells.clone(),
            color_counts,
            object_counts,
        }
    }

    pub fn count(&self, color: Color) -> usize {
        self.color_counts[color as usize]
    }

    pub fn present(&self, obj: Object) -> bool {
        self.object_counts[obj.color as usize * Shape::ALL.len() + obj.shape as usize] > 0
    }

    pub fn cell(&self, r: usize, c: usize) -> Cell {
        self.cells[r * self.cols + c]
    }

    /// Colors with at least one object, canonical order.
    pub fn shape_present(&self, shape: Shape) -> bool {
        self.cells.iter().flatten().any(|o| o.shape == shape)
    }

    pub fn colors_present(&self) -> Vec<Color> {
        Color::ALL.iter().copied().filter(|&c| self.count(c) > 0).collect()
    }
}

/// Random grid; integer-only draws so the output is platform independent.
pub fn make_world(seed: u64, grid: &GridConfig) -> Result<(ToyImage, Facts)> {
    grid.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = all_objects();
    let cells = (0..grid.rows * grid.cols)
        .map(|_| {
            let filled = rng.random_range(0..1000u32) < grid.fill_permille;
            filled.then(|| objects[rng.random_range(0..objects.len())])
        })
        .collect();
    let img = ToyImage {
        rows: grid.rows,
        cols: grid.cols,
        cells,
    };
    let facts = Facts::from_image(&img);
    Ok((img, facts))
}
