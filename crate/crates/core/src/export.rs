//! CSV and PGM emission with matching parsers, and FNV-1a checksums.
//!
//! CSV is comma-separated with LF line endings. Reals are written in Rust's
//! shortest round-trip form, so parsing a written file gives back the same
//! values bit for bit.

use std::io::Cursor;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use crate::attention::MaskGrid;
use crate::error::{Error, Result};
use crate::matcher::Grid;
use crate::tensor::FeatureMap;

/// Heat-map CSV values are rounded to `1 / HEATMAP_SCALE` before writing so
/// that kernels differing in the last few bits emit identical files.
pub const HEATMAP_SCALE: f64 = 1e9;

pub fn grid_csv(g: &Grid) -> String {
    let mut out = String::new();
    for row in g.data.chunks(g.cols.max(1)) {
        push_row(&mut out, row);
    }
    out
}

fn push_row(out: &mut String, row: &[f64]) {
    for (i, v) in row.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&v.to_string());
    }
    out.push('\n');
}

fn parse_row(line: usize, text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|cell| {
            cell.trim().parse::<f64>().map_err(|e| Error::Parse {
                line,
                msg: format!("`{cell}`: {e}"),
            })
        })
        .collect()
}

pub fn parse_grid_csv(text: &str) -> Result<Grid> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let row = parse_row(i + 1, line)?;
        match cols {
            None => cols = Some(row.len()),
            Some(n) if n != row.len() => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected {n} values, found {}", row.len()),
                })
            }
            Some(_) => {}
        }
        data.extend(row);
        rows += 1;
    }
    Ok(Grid {
        rows,
        cols: cols.unwrap_or(0),
        data,
    })
}

/// Nearest double to `round(v · 10⁹) / 10⁹`, which prints as at most nine
/// decimals.
pub fn quantize(v: f64) -> f64 {
    (v * HEATMAP_SCALE).round() / HEATMAP_SCALE
}

/// The grid as it is written to a heat-map CSV.
pub fn quantized(g: &Grid) -> Grid {
    Grid {
        data: g.data.iter().map(|&v| quantize(v)).collect(),
        ..g.clone()
    }
}

pub fn heatmap_csv(g: &Grid) -> String {
    grid_csv(&quantized(g))
}

/// Mask grid as CSV, rows `y = −r+1 .. r−1`.
pub fn mask_csv(m: &MaskGrid) -> String {
    let mut out = String::new();
    for row in m.rows() {
        push_row(&mut out, &row);
    }
    out
}

/// Header line `channels,height,width`, then one line per `(c, y)` row.
pub fn feature_map_csv(f: &FeatureMap) -> String {
    let mut out = format!("{},{},{}\n", f.channels(), f.height(), f.width());
    for row in f.data().chunks(f.width()) {
        push_row(&mut out, row);
    }
    out
}

pub fn parse_feature_map_csv(text: &str) -> Result<FeatureMap> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        msg: "missing header".into(),
    })?;
    let dims: Vec<usize> = header
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: format!("bad header: {e}"),
        })?;
    let [d, h, w] = dims[..] else {
        return Err(Error::Parse {
            line: 1,
            msg: "header must be `channels,height,width`".into(),
        });
    };
    let mut data = Vec::with_capacity(d * h * w);
    for (i, line) in lines {
        let row = parse_row(i + 1, line)?;
        if row.len() != w {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected {w} values, found {}", row.len()),
            });
        }
        data.extend(row);
    }
    FeatureMap::new(d, h, w, data)
}

/// Linear map of `[min, max]` onto `0..=255`; a constant grid maps to 0.
pub fn to_gray(g: &Grid) -> Vec<u8> {
    let lo = g.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = g.max();
    let span = hi - lo;
    g.data
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Binary 8-bit PGM (P5) of the linearly normalized grid.
pub fn pgm_bytes(g: &Grid) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(
            &to_gray(g),
            g.cols as u32,
            g.rows as u32,
            ExtendedColorType::L8,
        )
        .map_err(image_error)?;
    Ok(out)
}

/// Decodes a PGM into `(rows, cols, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::load(Cursor::new(bytes), ImageFormat::Pnm)
        .map_err(image_error)?
        .into_luma8();
    Ok((img.height() as usize, img.width() as usize, img.into_raw()))
}

fn image_error(e: image::ImageError) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

/// Checksum as stored in golden files: 16 lowercase hex digits.
pub fn checksum_hex(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a64(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::spatial_mask;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    #[test]
    fn fnv_reference_values() {
        // published FNV-1a 64 test vectors
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
        assert_eq!(checksum_hex(b"a"), "af63dc4c8601ec8c");
    }

    #[test]
    fn mask_csv_rows() {
        assert_eq!(mask_csv(&spatial_mask(1)), "0\n");
        assert_eq!(
            mask_csv(&spatial_mask(2)),
            "-0.5,-0.25,-0.5\n-0.25,0,-0.25\n-0.5,-0.25,-0.5\n"
        );
    }

    #[test]
    fn pgm_header_and_scaling() {
        let g = Grid {
            rows: 1,
            cols: 3,
            data: vec![0.0, 0.5, 1.0],
        };
        let bytes = pgm_bytes(&g).unwrap();
        assert!(bytes.starts_with(b"P5"));
        assert_eq!(parse_pgm(&bytes).unwrap(), (1, 3, vec![0, 128, 255]));
        let flat = Grid {
            rows: 2,
            cols: 2,
            data: vec![0.3; 4],
        };
        assert_eq!(parse_pgm(&pgm_bytes(&flat).unwrap()).unwrap().2, vec![0; 4]);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse_grid_csv("1,2\n3\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(parse_grid_csv("1,x\n").is_err());
        assert!(parse_feature_map_csv("1,1\n0\n").is_err());
        assert!(parse_feature_map_csv("1,1,2\n0\n").is_err());
    }

    proptest! {
        #[test]
        fn grid_csv_round_trips(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..6) {
            let mut rng = SplitMix64::new(seed);
            let g = Grid {
                rows,
                cols,
                data: (0..rows * cols).map(|_| rng.normal() * 1e3).collect(),
            };
            prop_assert_eq!(parse_grid_csv(&grid_csv(&g)).unwrap(), g.clone());
            let q = quantized(&g);
            prop_assert_eq!(parse_grid_csv(&heatmap_csv(&g)).unwrap(), q);
        }

        #[test]
        fn feature_map_csv_round_trips(seed in any::<u64>(), d in 1usize..4, h in 1usize..5, w in 1usize..5) {
            let mut rng = SplitMix64::new(seed);
            let f = FeatureMap::from_fn(d, h, w, |_, _, _| rng.normal()).unwrap();
            prop_assert_eq!(parse_feature_map_csv(&feature_map_csv(&f)).unwrap(), f);
        }

        #[test]
        fn pgm_round_trips(seed in any::<u64>(), rows in 1usize..8, cols in 1usize..8) {
            let mut rng = SplitMix64::new(seed);
            let g = Grid { rows, cols, data: (0..rows * cols).map(|_| rng.next_f64()).collect() };
            prop_assert_eq!(parse_pgm(&pgm_bytes(&g).unwrap()).unwrap(), (rows, cols, to_gray(&g)));
        }
    }
}
