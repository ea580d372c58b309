//! Binary morphology helpers shared by instancing and target construction.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

/// Row-major binary raster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

const N8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];
const N4: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), height * width, "mask data length mismatch");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(height, width);
        for r in 0..height {
            for c in 0..width {
                m.data[r * width + c] = f(r, c);
            }
        }
        m
    }

    pub fn from_pixels(height: usize, width: usize, pixels: &[(usize, usize)]) -> Self {
        let mut m = Self::new(height, width);
        for &(r, c) in pixels {
            m.set(r, c, true);
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.width + c] = v;
    }

    #[inline]
    fn get_signed(&self, r: isize, c: isize) -> bool {
        r >= 0
            && c >= 0
            && (r as usize) < self.height
            && (c as usize) < self.width
            && self.data[r as usize * self.width + c as usize]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i / w, i % w))
    }

    pub fn union(&self, other: &BinaryMask) -> BinaryMask {
        assert_eq!(self.dims(), other.dims());
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a || b).collect(),
        }
    }

    pub fn minus(&self, other: &BinaryMask) -> BinaryMask {
        assert_eq!(self.dims(), other.dims());
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && !b).collect(),
        }
    }

    pub fn intersect_count(&self, other: &BinaryMask) -> usize {
        self.data.iter().zip(&other.data).filter(|(&a, &b)| a && b).count()
    }

    /// Number of set 8-neighbors.
    pub(crate) fn neighbor_count(&self, r: usize, c: usize) -> usize {
        N8.iter()
            .filter(|(dr, dc)| self.get_signed(r as isize + dr, c as isize + dc))
            .count()
    }
}

/// 3x3 erosion; pixels outside the raster count as unset.
pub fn erode(mask: &BinaryMask) -> BinaryMask {
    let mut out = BinaryMask::new(mask.height, mask.width);
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) && mask.neighbor_count(r, c) == 8 {
                out.set(r, c, true);
            }
        }
    }
    out
}

/// 3x3 dilation.
pub fn dilate(mask: &BinaryMask) -> BinaryMask {
    let mut out = mask.clone();
    for (r, c) in mask.pixels() {
        for (dr, dc) in N8 {
            let (rr, cc) = (r as isize + dr, c as isize + dc);
            if rr >= 0 && cc >= 0 && (rr as usize) < mask.height && (cc as usize) < mask.width {
                out.set(rr as usize, cc as usize, true);
            }
        }
    }
    out
}

/// Connected components as lists of pixel indices, ordered by the raster
/// position of each component's first pixel.
pub fn components(mask: &BinaryMask, eight: bool) -> Vec<Vec<usize>> {
    let (h, w) = mask.dims();
    let offsets: &[(isize, isize)] = if eight { &N8 } else { &N4 };
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for (dr, dc) in offsets {
                let (rr, cc) = (r + dr, c + dc);
                if rr < 0 || cc < 0 || rr as usize >= h || cc as usize >= w {
                    continue;
                }
                let j = rr as usize * w + cc as usize;
                if mask.data[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Pixels of the complement reachable from the raster border through
/// 4-connected steps.
pub fn border_reachable(walls: &BinaryMask) -> Vec<bool> {
    let (h, w) = walls.dims();
    let mut reached = vec![false; h * w];
    let mut queue = VecDeque::new();
    let seed = |i: usize, reached: &mut Vec<bool>, queue: &mut VecDeque<usize>| {
        if !walls.data[i] && !reached[i] {
            reached[i] = true;
            queue.push_back(i);
        }
    };
    for c in 0..w {
        seed(c, &mut reached, &mut queue);
        seed((h - 1) * w + c, &mut reached, &mut queue);
    }
    for r in 0..h {
        seed(r * w, &mut reached, &mut queue);
        seed(r * w + w - 1, &mut reached, &mut queue);
    }
    while let Some(i) = queue.pop_front() {
        let (r, c) = ((i / w) as isize, (i % w) as isize);
        for (dr, dc) in N4 {
            let (rr, cc) = (r + dr, c + dc);
            if rr < 0 || cc < 0 || rr as usize >= h || cc as usize >= w {
                continue;
            }
            let j = rr as usize * w + cc as usize;
            if !walls.data[j] && !reached[j] {
                reached[j] = true;
                queue.push_back(j);
            }
        }
    }
    reached
}

/// Zhang-Suen thinning to a one-pixel-wide 8-connected skeleton.
pub fn thin(mask: &BinaryMask) -> BinaryMask {
    let mut cur = mask.clone();
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for (r, c) in cur.pixels() {
                let (r, c) = (r as isize, c as isize);
                // P2..P9 clockwise from north
                let p = [
                    cur.get_signed(r - 1, c),
                    cur.get_signed(r - 1, c + 1),
                    cur.get_signed(r, c + 1),
                    cur.get_signed(r + 1, c + 1),
                    cur.get_signed(r + 1, c),
                    cur.get_signed(r + 1, c - 1),
                    cur.get_signed(r, c - 1),
                    cur.get_signed(r - 1, c - 1),
                ];
                let b = p.iter().filter(|&&x| x).count();
                if !(2..=6).contains(&b) {
                    continue;
                }
                let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
                if a != 1 {
                    continue;
                }
                let (p2, p4, p6, p8) = (p[0], p[2], p[4], p[6]);
                let ok = if pass == 0 {
                    !(p2 && p4 && p6) && !(p4 && p6 && p8)
                } else {
                    !(p2 && p4 && p8) && !(p2 && p6 && p8)
                };
                if ok {
                    remove.push((r as usize, c as usize));
                }
            }
            changed |= !remove.is_empty();
            for (r, c) in remove {
                cur.set(r, c, false);
            }
        }
        if !changed {
            return cur;
        }
    }
}

/// Rasterizes the closed segment between two pixels (Bresenham).
pub fn draw_line(mask: &mut BinaryMask, from: (usize, usize), to: (usize, usize)) {
    let (mut r, mut c) = (from.0 as isize, from.1 as isize);
    let (r1, c1) = (to.0 as isize, to.1 as isize);
    let dr = (r1 - r).abs();
    let dc = -(c1 - c).abs();
    let sr = if r < r1 { 1 } else { -1 };
    let sc = if c < c1 { 1 } else { -1 };
    let mut err = dr + dc;
    loop {
        mask.set(r as usize, c as usize, true);
        if r == r1 && c == c1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dc {
            err += dc;
            r += sr;
        }
        if e2 <= dr {
            err += dr;
            c += sc;
        }
    }
}
