//! Router coordinates on the 2D mesh.
//!
//! Compute tiles are laid side by side along the column axis, so a model
//! spanning several tiles is addressed as one wide mesh. Column `c` belongs
//! to tile `c / cols_per_ct`; links that cross a tile boundary are
//! inter-chiplet links and carry a higher hop latency.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Coord {
    pub row: u32,
    pub col: u32,
}

impl Coord {
    pub const fn new(row: u32, col: u32) -> Self {
        Self { row, col }
    }

    pub fn manhattan(self, other: Coord) -> u32 {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }

    pub fn step(self, dir: Dir) -> Option<Coord> {
        match dir {
            Dir::North => self.row.checked_sub(1).map(|row| Coord { row, col: self.col }),
            Dir::South => Some(Coord { row: self.row + 1, col: self.col }),
            Dir::West => self.col.checked_sub(1).map(|col| Coord { row: self.row, col }),
            Dir::East => Some(Coord { row: self.row, col: self.col + 1 }),
        }
    }

    /// Direction of the neighbouring router `to`, if the two are adjacent.
    pub fn dir_to(self, to: Coord) -> Option<Dir> {
        Dir::ALL.into_iter().find(|&d| self.step(d) == Some(to))
    }
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.row, self.col)
    }
}

/// Planar port directions. Row index grows southwards, column index eastwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dir {
    North,
    East,
    South,
    West,
}

impl Dir {
    /// Fixed neighbour order used by every tree builder: X moves first.
    pub const ALL: [Dir; 4] = [Dir::East, Dir::West, Dir::South, Dir::North];

    pub fn index(self) -> usize {
        match self {
            Dir::North => 0,
            Dir::East => 1,
            Dir::South => 2,
            Dir::West => 3,
        }
    }

    pub fn opposite(self) -> Dir {
        match self {
            Dir::North => Dir::South,
            Dir::South => Dir::North,
            Dir::East => Dir::West,
            Dir::West => Dir::East,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Dir::North => "N",
            Dir::East => "E",
            Dir::South => "S",
            Dir::West => "W",
        }
    }
}

/// Geometry of the (possibly multi-tile) mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeshGeometry {
    pub rows: u32,
    pub cols_per_ct: u32,
    pub cts: u32,
}

impl MeshGeometry {
    pub fn single(rows: u32, cols: u32) -> Self {
        Self { rows, cols_per_ct: cols, cts: 1 }
    }

    pub fn total_cols(&self) -> u32 {
        self.cols_per_ct * self.cts
    }

    pub fn contains(&self, c: Coord) -> bool {
        c.row < self.rows && c.col < self.total_cols()
    }

    pub fn ct_of(&self, c: Coord) -> u32 {
        c.col / self.cols_per_ct
    }

    pub fn router_count(&self) -> usize {
        (self.rows * self.total_cols()) as usize
    }

    /// Dense index of a router, row-major over the full mesh.
    pub fn index(&self, c: Coord) -> usize {
        (c.row * self.total_cols() + c.col) as usize
    }

    pub fn coord(&self, index: usize) -> Coord {
        let w = self.total_cols() as usize;
        Coord::new((index / w) as u32, (index % w) as u32)
    }

    pub fn neighbor(&self, c: Coord, dir: Dir) -> Option<Coord> {
        c.step(dir).filter(|n| self.contains(*n))
    }

    /// True when the link between adjacent routers `a` and `b` crosses a tile boundary.
    pub fn crosses_ct(&self, a: Coord, b: Coord) -> bool {
        self.ct_of(a) != self.ct_of(b)
    }

    /// Number of tile-boundary crossings on the dimension-ordered route from `a` to `b`.
    pub fn ct_crossings(&self, a: Coord, b: Coord) -> u32 {
        self.ct_of(a).abs_diff(self.ct_of(b))
    }
}

/// Rectangle of routers, `[row_start, row_end) × [col_start, col_end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Region {
    pub row_start: u32,
    pub row_end: u32,
    pub col_start: u32,
    pub col_end: u32,
}

impl Region {
    pub fn new(origin: Coord, height: u32, width: u32) -> Self {
        Self {
            row_start: origin.row,
            row_end: origin.row + height,
            col_start: origin.col,
            col_end: origin.col + width,
        }
    }

    pub fn origin(&self) -> Coord {
        Coord::new(self.row_start, self.col_start)
    }

    pub fn height(&self) -> u32 {
        self.row_end - self.row_start
    }

    pub fn width(&self) -> u32 {
        self.col_end - self.col_start
    }

    pub fn cells(&self) -> u32 {
        self.height() * self.width()
    }

    pub fn contains(&self, c: Coord) -> bool {
        (self.row_start..self.row_end).contains(&c.row) && (self.col_start..self.col_end).contains(&c.col)
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        self.row_start < other.row_end
            && other.row_start < self.row_end
            && self.col_start < other.col_end
            && other.col_start < self.col_end
    }

    /// Routers in row-major order.
    pub fn routers(&self) -> impl Iterator<Item = Coord> + '_ {
        (self.row_start..self.row_end)
            .flat_map(move |r| (self.col_start..self.col_end).map(move |c| Coord::new(r, c)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dir_round_trip() {
        let c = Coord::new(3, 3);
        for d in Dir::ALL {
            let n = c.step(d).unwrap();
            assert_eq!(c.dir_to(n), Some(d));
            assert_eq!(n.dir_to(c), Some(d.opposite()));
        }
        assert_eq!(Coord::new(0, 0).step(Dir::North), None);
    }

    #[test]
    fn ct_boundaries() {
        let g = MeshGeometry { rows: 4, cols_per_ct: 4, cts: 3 };
        assert_eq!(g.total_cols(), 12);
        assert_eq!(g.ct_of(Coord::new(0, 7)), 1);
        assert!(g.crosses_ct(Coord::new(0, 3), Coord::new(0, 4)));
        assert!(!g.crosses_ct(Coord::new(0, 4), Coord::new(0, 5)));
        assert_eq!(g.ct_crossings(Coord::new(1, 0), Coord::new(2, 11)), 2);
        assert_eq!(g.coord(g.index(Coord::new(2, 9))), Coord::new(2, 9));
    }
}
