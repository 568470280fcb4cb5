//! Street-image segmentation features: visual entropy and grid averages.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::geometry::ProjectedPoint;
use super::grid::GridSpec;
use crate::error::{invalid, Result};

/// Number of semantic segmentation categories per image.
pub const N_CATEGORIES: usize = 18;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    pub point_id: String,
    pub location: ProjectedPoint,
    pub heading: u16,
    pub proportions: [f64; N_CATEGORIES],
}

impl ImageRecord {
    pub fn validate(&self) -> Result<()> {
        if !self.location.is_finite() {
            return Err(invalid!("image `{}` has a non-finite location", self.point_id));
        }
        if ![0, 90, 180, 270].contains(&self.heading) {
            return Err(invalid!(
                "image `{}` heading {} not in {{0, 90, 180, 270}}",
                self.point_id,
                self.heading
            ));
        }
        if self.proportions.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid!("image `{}` has a proportion outside [0, 1]", self.point_id));
        }
        let total: f64 = self.proportions.iter().sum();
        if total > 1.0 + 1e-9 {
            return Err(invalid!("image `{}` proportions sum to {total} > 1", self.point_id));
        }
        Ok(())
    }
}

/// Shannon entropy in bits of a category-proportion vector.
///
/// The vector is renormalized to sum to one first, and zero entries
/// contribute nothing. The result lies in `[0, log2(len)]`.
pub fn visual_entropy(proportions: &[f64]) -> Result<f64> {
    if proportions.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(invalid!("proportions must be finite and nonnegative"));
    }
    let total: f64 = proportions.iter().sum();
    if !(total > 0.0) {
        return Err(invalid!("all-zero proportion vector has no content"));
    }
    let h = -proportions
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| {
            let q = p / total;
            q * q.log2()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellVisual {
    pub cell_id: u64,
    pub n_images: usize,
    /// Per-category mean proportion; `None` when the cell has no images.
    pub means: Option<[f64; N_CATEGORIES]>,
    pub entropy: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ImageDiagnostics {
    pub outside: usize,
    pub no_content: usize,
    pub missing_cells: Vec<u64>,
}

/// Average image-level proportions and entropies within each grid cell.
pub fn aggregate_images(
    images: &[ImageRecord],
    grid: &GridSpec,
) -> Result<(Vec<CellVisual>, ImageDiagnostics)> {
    let mut acc: BTreeMap<u64, ([f64; N_CATEGORIES], f64, usize, usize)> = grid
        .cell_ids()
        .into_iter()
        .map(|id| (id, ([0.0; N_CATEGORIES], 0.0, 0, 0)))
        .collect();
    let mut diag = ImageDiagnostics::default();
    for img in images {
        img.validate()?;
        let Some(slot) = grid.locate(img.location).and_then(|id| acc.get_mut(&id)) else {
            diag.outside += 1;
            continue;
        };
        for (s, p) in slot.0.iter_mut().zip(&img.proportions) {
            *s += p;
        }
        slot.2 += 1;
        // an all-unclassified image still counts toward category means
        match visual_entropy(&img.proportions) {
            Ok(h) => {
                slot.1 += h;
                slot.3 += 1;
            }
            Err(_) => diag.no_content += 1,
        }
    }
    let rows: Vec<CellVisual> = acc
        .into_iter()
        .map(|(cell_id, (sums, h, n, n_h))| CellVisual {
            cell_id,
            n_images: n,
            means: (n > 0).then(|| sums.map(|s| s / n as f64)),
            entropy: (n_h > 0).then(|| h / n_h as f64),
        })
        .collect();
    diag.missing_cells = rows.iter().filter(|r| r.means.is_none()).map(|r| r.cell_id).collect();
    Ok((rows, diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_pipeline::geometry::Rect;
    use crate::data_pipeline::grid::build_grid;

    fn image(x: f64, y: f64, props: [f64; N_CATEGORIES]) -> ImageRecord {
        ImageRecord {
            point_id: "p".into(),
            location: ProjectedPoint::new(x, y),
            heading: 0,
            proportions: props,
        }
    }

    #[test]
    fn entropy_reference_values() {
        let uniform = [1.0 / 18.0; 18];
        assert!((visual_entropy(&uniform).unwrap() - 18f64.log2()).abs() < 1e-12);
        let mut one_hot = [0.0; 18];
        one_hot[4] = 1.0;
        assert_eq!(visual_entropy(&one_hot).unwrap(), 0.0);
        let mut half = [0.0; 18];
        half[0] = 0.5;
        half[1] = 0.5;
        assert_eq!(visual_entropy(&half).unwrap(), 1.0);
        // renormalized: (0.25, 0.25) is the same as (0.5, 0.5)
        half[0] = 0.25;
        half[1] = 0.25;
        assert_eq!(visual_entropy(&half).unwrap(), 1.0);
        assert!(visual_entropy(&[0.0; 18]).is_err());
    }

    #[test]
    fn cell_means() {
        let (spec, _) = build_grid(Rect::new(0.0, 0.0, 4000.0, 2000.0), 2000.0, None).unwrap();
        let mut a = [0.0; 18];
        a[0] = 1.0;
        let mut b = [0.0; 18];
        b[0] = 0.5;
        b[1] = 0.5;
        let (rows, diag) = aggregate_images(&[image(10.0, 10.0, a), image(20.0, 20.0, b)], &spec).unwrap();
        assert_eq!(rows[0].entropy, Some(0.5));
        assert_eq!(rows[0].means.unwrap()[0], 0.75);
        assert_eq!(rows[1].means, None);
        assert_eq!(diag.missing_cells, vec![1]);

        let (rows, _) = aggregate_images(&[image(10.0, 10.0, b)], &spec).unwrap();
        assert_eq!(rows[0].means.unwrap(), b);
    }

    #[test]
    fn invalid_images_rejected() {
        let (spec, _) = build_grid(Rect::new(0.0, 0.0, 2000.0, 2000.0), 2000.0, None).unwrap();
        let mut over = [0.0; 18];
        over[0] = 0.7;
        over[1] = 0.7;
        assert!(aggregate_images(&[image(1.0, 1.0, over)], &spec).is_err());
        let mut bad_heading = image(1.0, 1.0, [0.0; 18]);
        bad_heading.heading = 45;
        assert!(bad_heading.validate().is_err());
    }

    #[test]
    fn four_headings_per_point_image_count() {
        // 4 headings per sampling point
        assert_eq!(57_088 * [0, 90, 180, 270].len(), 228_352);
    }
}
