//! Bitmap rendering of planar trees and pruned selections.
//!
//! Axis 0 runs left to right, axis 1 bottom to top; row 0 of the pixel
//! buffer is the top of the image, as PGM/PPM expect.

use crate::error::{Error, Result};
use crate::mcube::coords_from_flat;
use crate::porosity::{self, Occupancy, OccupiedSet};
use crate::pruner::PrunedTree;
use crate::sampler::PercolationTree;
use std::io::Write;

const TARGET_SIDE: u64 = 512;
const MAX_SIDE: u64 = 8192;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    /// Row-major, row 0 at the top. 0 = occupied/dark, 255 = empty/white.
    pub pixels: Vec<u8>,
}

impl GrayImage {
    fn blank(side_cells: u64) -> Result<(GrayImage, u64)> {
        if side_cells == 0 || side_cells > MAX_SIDE {
            return Err(Error::ResourceCap(format!(
                "grid side {side_cells} exceeds the raster cap {MAX_SIDE}"
            )));
        }
        let scale = (TARGET_SIDE.div_ceil(side_cells)).max(1);
        let side = side_cells * scale;
        let img = GrayImage {
            width: side as u32,
            height: side as u32,
            pixels: vec![255u8; (side * side) as usize],
        };
        Ok((img, scale))
    }

    fn fill_cell(&mut self, side_cells: u64, scale: u64, c0: u64, c1: u64, value: u8) {
        let x0 = c0 * scale;
        // Row 0 is the top: axis-1 coordinate counts from the bottom.
        let y0 = (side_cells - 1 - c1) * scale;
        let w = self.width as u64;
        for dy in 0..scale {
            let row = (y0 + dy) * w + x0;
            let row = row as usize;
            self.pixels[row..row + scale as usize].fill(value);
        }
    }

    pub fn pixel(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }
}

fn planar_only(dim: u32) -> Result<()> {
    if dim != 2 {
        return Err(Error::Unsupported(format!(
            "rendering is implemented for dimension 2, got {dim}"
        )));
    }
    Ok(())
}

/// Render the retained or surviving cubes of one level as black cells.
pub fn raster_occupancy(
    tree: &PercolationTree,
    level: u32,
    occ: Occupancy,
) -> Result<GrayImage> {
    let config = tree.config();
    planar_only(config.dim)?;
    let side_cells = u64::from(config.base).pow(level);
    let (mut img, scale) = GrayImage::blank(side_cells)?;
    let indices: Vec<u64> = match occ {
        Occupancy::Retained => tree.retained(level)?.to_vec(),
        Occupancy::Surviving => tree.surviving(level)?,
    };
    for idx in indices {
        let c = coords_from_flat(config.base, config.dim, level, idx);
        img.fill_cell(side_cells, scale, c[0], c[1], 0);
    }
    Ok(img)
}

/// Render the selection of one block level as black cells.
pub fn raster_pruned(pruned: &PrunedTree, block_level: u32) -> Result<GrayImage> {
    let config = pruned.config();
    planar_only(config.dim)?;
    let level = block_level * pruned.block();
    let side_cells = u64::from(config.base).pow(level);
    let (mut img, scale) = GrayImage::blank(side_cells)?;
    for &idx in pruned.selected(block_level)? {
        let c = coords_from_flat(config.base, config.dim, level, idx);
        img.fill_cell(side_cells, scale, c[0], c[1], 0);
    }
    Ok(img)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatMode {
    /// Upper porosity over the scale grid (worst hole seen at the center).
    Upor,
    /// Lower porosity over the scale grid.
    Lpor,
}

/// Per-cube porosity heat map: each surviving cube at `level` is shaded by
/// the porosity of the surviving set at its center, `round(255*(1-2*rho))`,
/// so maximally porous cells are black. Empty cells stay white.
pub fn raster_heatmap(
    tree: &PercolationTree,
    level: u32,
    scales: &[f64],
    grid_margin: u32,
    mode: HeatMode,
) -> Result<GrayImage> {
    let config = tree.config();
    planar_only(config.dim)?;
    let set = OccupiedSet::from_tree(tree, Occupancy::Surviving, config.depth)?;
    let side_cells = u64::from(config.base).pow(level);
    let (mut img, scale) = GrayImage::blank(side_cells)?;
    for idx in tree.surviving(level)? {
        let addr = tree_addr(tree, level, idx)?;
        let profile = porosity::porosity_profile(&set, &addr.center(), scales, grid_margin)?;
        let rho = match mode {
            HeatMode::Upor => profile.upor,
            HeatMode::Lpor => profile.lpor,
        };
        let value = (255.0 * (1.0 - 2.0 * rho)).round().clamp(0.0, 255.0) as u8;
        let c = addr.coords();
        img.fill_cell(side_cells, scale, c[0], c[1], value);
    }
    Ok(img)
}

fn tree_addr(
    tree: &PercolationTree,
    level: u32,
    idx: u64,
) -> Result<crate::mcube::CubeAddress> {
    let config = tree.config();
    crate::mcube::CubeAddress::from_flat(config.base, config.dim, level, idx)
}

/// Binary PGM (P5).
pub fn write_pgm<W: Write>(img: &GrayImage, out: &mut W) -> Result<()> {
    write!(out, "P5\n{} {}\n255\n", img.width, img.height)?;
    out.write_all(&img.pixels)?;
    Ok(())
}

fn heat_rgb(v: u8) -> [u8; 3] {
    if v == 255 {
        return [255, 255, 255];
    }
    // Intensity 0..1, dark cells hottest; classic piecewise ramp.
    let t = f64::from(255 - v) / 255.0;
    let ramp = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    [
        ramp(1.5 - (t - 0.75).abs() * 4.0),
        ramp(1.5 - (t - 0.50).abs() * 4.0),
        ramp(1.5 - (t - 0.25).abs() * 4.0),
    ]
}

/// Binary PPM (P6) with a heat palette over the gray values.
pub fn write_ppm<W: Write>(img: &GrayImage, out: &mut W) -> Result<()> {
    write!(out, "P6\n{} {}\n255\n", img.width, img.height)?;
    let mut row = Vec::with_capacity(img.width as usize * 3);
    for y in 0..img.height {
        row.clear();
        for x in 0..img.width {
            row.extend_from_slice(&heat_rgb(img.pixel(x, y)));
        }
        out.write_all(&row)?;
    }
    Ok(())
}
