//! Scene geometry and rasterization. A scene is a list of colored shapes on
//! a 32x32 grid. The generator constrains placement (one object per fixed
//! quadrant, canonical color-ascending order); the renderer accepts any
//! in-bounds spec.

use sha2::{Digest, Sha256};

pub const GRID: usize = 32;
pub const CHANNELS: usize = 3;

/// Quadrant anchors (y, x) in reading order. Object i of a generated scene
/// sits at QUADRANTS[i].
pub const QUADRANTS: [(usize, usize); 4] = [(0, 0), (0, 16), (16, 0), (16, 16)];

/// Object fill colors; the background stays black so color mass per region
/// is a linear readout from pixels.
pub const PALETTE: [[u8; 3]; 6] = [
    [220, 60, 60],  // red
    [70, 190, 80],  // green
    [60, 90, 220],  // blue
    [235, 210, 60], // yellow
    [160, 70, 200], // purple
    [240, 150, 40], // orange
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
    Bar,
}

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Bar => "bar",
        }
    }
}

/// Pixel-space object. `w`/`h` is the bounding box; circles use `w` as the
/// diameter (w == h for generated scenes).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Object {
    pub shape: Shape,
    pub color: usize,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Object {
    /// Modifier word as used in captions and refexps.
    pub fn mod_word(&self) -> &'static str {
        match self.shape {
            Shape::Bar => {
                if self.w >= self.h {
                    "wide"
                } else {
                    "tall"
                }
            }
            _ => {
                if self.w >= 16 {
                    "large"
                } else {
                    "small"
                }
            }
        }
    }

    /// Center doubled to stay in integers; used for relation comparisons.
    pub fn cx2(&self) -> usize {
        2 * self.x + self.w
    }

    pub fn cy2(&self) -> usize {
        2 * self.y + self.h
    }

    /// True where the object paints pixel (r, c) of its own full footprint.
    fn covers(&self, r: usize, c: usize) -> bool {
        if r < self.y || r >= self.y + self.h || c < self.x || c >= self.x + self.w {
            return false;
        }
        match self.shape {
            Shape::Square | Shape::Bar => true,
            Shape::Circle => {
                // Disc inscribed in the bounding box, pixel-center test.
                let rad = self.w as f64 / 2.0;
                let dy = r as f64 + 0.5 - (self.y as f64 + rad);
                let dx = c as f64 + 0.5 - (self.x as f64 + rad);
                dy * dy + dx * dx <= rad * rad
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Scene {
    pub objects: Vec<Object>,
}

impl Scene {
    /// Rasterizes to (image, per-object masks). The image paints objects in
    /// list order (later wins); each mask is the object's full footprint,
    /// occluded pixels included.
    pub fn render(&self) -> (Vec<u8>, Vec<Vec<u8>>) {
        let mut image = vec![0u8; GRID * GRID * CHANNELS];
        let mut masks = Vec::with_capacity(self.objects.len());
        for obj in &self.objects {
            let mut mask = vec![0u8; GRID * GRID];
            for r in 0..GRID {
                for c in 0..GRID {
                    if obj.covers(r, c) {
                        mask[r * GRID + c] = 1;
                        let px = (r * GRID + c) * CHANNELS;
                        image[px..px + 3].copy_from_slice(&PALETTE[obj.color]);
                    }
                }
            }
            masks.push(mask);
        }
        (image, masks)
    }

    /// Painted pixel count per object footprint (exact shape area).
    pub fn areas(&self) -> Vec<usize> {
        self.objects
            .iter()
            .map(|o| {
                let mut n = 0;
                for r in o.y..o.y + o.h {
                    for c in o.x..o.x + o.w {
                        if o.covers(r, c) {
                            n += 1;
                        }
                    }
                }
                n
            })
            .collect()
    }

    pub fn in_bounds(&self) -> bool {
        self.objects
            .iter()
            .all(|o| o.w > 0 && o.h > 0 && o.x + o.w <= GRID && o.y + o.h <= GRID)
    }

    /// Stable identity for split dedup.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for o in &self.objects {
            h.update(format!("{:?}|{}|{}|{}|{}|{};", o.shape, o.color, o.x, o.y, o.w, o.h));
        }
        h.finalize().into()
    }
}

/// The six generated object variants. Returns (shape, w, h) for a variant
/// index; placement anchors come from QUADRANTS.
pub fn variant_dims(variant: usize) -> (Shape, usize, usize) {
    match variant {
        0 => (Shape::Square, 8, 8),
        1 => (Shape::Square, 16, 16),
        2 => (Shape::Circle, 8, 8),
        3 => (Shape::Circle, 16, 16),
        4 => (Shape::Bar, 16, 8),
        5 => (Shape::Bar, 8, 16),
        _ => unreachable!("variant out of range"),
    }
}

pub const VARIANTS: usize = 6;
