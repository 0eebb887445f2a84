//! Grouping-filter shape catalog. A `GFilterSpec` describes one scanning
//! filter shape (rows x cols, dilation, and how many independent instances of
//! it a block learns); a `GFilterSet` is the named collection a block scans
//! its folded channel map with.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GFilterSpec {
    pub rows: usize,
    pub cols: usize,
    pub dilation: usize,
    /// Number of learned instances of this shape (identical across the set).
    pub count: usize,
}

impl GFilterSpec {
    pub fn new(rows: usize, cols: usize, dilation: usize, count: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || dilation == 0 || count == 0 {
            return Err(Error::Config(format!(
                "grouping filter must have positive extents, got {rows}x{cols} d{dilation} x{count}"
            )));
        }
        Ok(GFilterSpec { rows, cols, dilation, count })
    }

    /// Rows/cols actually covered once dilation spreads the taps.
    pub fn effective_extent(&self) -> (usize, usize) {
        (
            self.dilation * (self.rows - 1) + 1,
            self.dilation * (self.cols - 1) + 1,
        )
    }

    /// Whether the filter fits a rows x cols map under valid (no-padding)
    /// scanning.
    pub fn fits(&self, map_rows: usize, map_cols: usize) -> bool {
        let (er, ec) = self.effective_extent();
        er <= map_rows && ec <= map_cols
    }

    /// Output extent of a valid stride-1 scan over a rows x cols map.
    pub fn scan_extent(&self, map_rows: usize, map_cols: usize) -> Option<(usize, usize)> {
        if !self.fits(map_rows, map_cols) {
            return None;
        }
        let (er, ec) = self.effective_extent();
        Some((map_rows - er + 1, map_cols - ec + 1))
    }

    pub fn label(&self) -> String {
        if self.dilation == 1 {
            format!("{}x{}", self.rows, self.cols)
        } else {
            format!("{}x{}(d{})", self.rows, self.cols, self.dilation)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GFilterSet {
    pub name: String,
    pub specs: Vec<GFilterSpec>,
}

/// The dilated add-on shape: a 5x5 filter with dilation 2, only ever attached
/// to a base set (preset suffix `-d`), never standalone.
pub const DILATED_ADDON: (usize, usize, usize) = (5, 5, 2);

impl GFilterSet {
    /// Build a named preset with `count` instances per shape. The square
    /// family grows from {3x3} to all odd-and-even squares up to 5x5, the mix
    /// family blends row/column filters with squares, horizon-n / vertical-n
    /// are the pure row / column ladders, and simple-1 / simple-3 are the
    /// short scanners meant for two-row stacked signal maps. A trailing `-d`
    /// appends the dilated 5x5 add-on.
    pub fn preset(name: &str, count: usize) -> Result<GFilterSet> {
        if count == 0 {
            return Err(Error::Config("filter instance count must be >= 1".into()));
        }
        let (base, dilated) = match name.strip_suffix("-d") {
            Some(b) => (b, true),
            None => (name, false),
        };
        if base.is_empty() || base == "d" {
            return Err(Error::DilatedStandalone);
        }
        let shapes: Vec<(usize, usize)> = match base {
            "square-1" => vec![(3, 3)],
            "square-2" => vec![(1, 1), (3, 3)],
            "square-3" => vec![(1, 1), (3, 3), (5, 5)],
            "square-4" => vec![(1, 1), (2, 2), (3, 3), (5, 5)],
            "square-5" => vec![(1, 1), (2, 2), (3, 3), (4, 4), (5, 5)],
            "mix-1" => vec![(3, 3)],
            "mix-2" => vec![(1, 5), (3, 3)],
            "mix-3" => vec![(1, 5), (3, 3), (5, 1)],
            "mix-4" => vec![(1, 1), (1, 5), (3, 3), (5, 1)],
            "mix-5" => vec![(1, 1), (1, 5), (3, 3), (5, 1), (5, 5)],
            "simple-1" => vec![(2, 1)],
            "simple-3" => vec![(1, 1), (2, 1), (2, 2)],
            _ => {
                if let Some(n) = parse_family(base, "horizon-") {
                    (1..=n).map(|c| (1, c)).collect()
                } else if let Some(n) = parse_family(base, "vertical-") {
                    (1..=n).map(|r| (r, 1)).collect()
                } else {
                    return Err(Error::UnknownPreset(name.to_string()));
                }
            }
        };
        let mut specs: Vec<GFilterSpec> = shapes
            .into_iter()
            .map(|(r, c)| GFilterSpec::new(r, c, 1, count))
            .collect::<Result<_>>()?;
        if dilated {
            let (r, c, d) = DILATED_ADDON;
            specs.push(GFilterSpec::new(r, c, d, count)?);
        }
        Ok(GFilterSet { name: name.to_string(), specs })
    }

    /// Specs that fit a rows x cols map; oversized filters are discarded.
    /// Errors when nothing survives, listing what was dropped.
    pub fn effective_specs(&self, map_rows: usize, map_cols: usize) -> Result<Vec<GFilterSpec>> {
        let (keep, drop): (Vec<_>, Vec<_>) = self
            .specs
            .iter()
            .cloned()
            .partition(|s| s.fits(map_rows, map_cols));
        if keep.is_empty() {
            return Err(Error::AllFiltersDiscarded {
                rows: map_rows,
                cols: map_cols,
                discarded: drop
                    .iter()
                    .map(|s| s.label())
                    .collect::<Vec<_>>()
                    .join(", "),
            });
        }
        Ok(keep)
    }

    /// Shapes dropped by the discard rule on a rows x cols map.
    pub fn discarded_specs(&self, map_rows: usize, map_cols: usize) -> Vec<GFilterSpec> {
        self.specs
            .iter()
            .cloned()
            .filter(|s| !s.fits(map_rows, map_cols))
            .collect()
    }

    /// Largest row extent across specs (rows of any stacked-mode scan target).
    pub fn max_rows(&self) -> usize {
        self.specs.iter().map(|s| s.effective_extent().0).max().unwrap_or(0)
    }
}

fn parse_family(name: &str, prefix: &str) -> Option<usize> {
    let n: usize = name.strip_prefix(prefix)?.parse().ok()?;
    (n >= 1).then_some(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shapes(set: &GFilterSet) -> Vec<(usize, usize, usize)> {
        set.specs.iter().map(|s| (s.rows, s.cols, s.dilation)).collect()
    }

    #[test]
    fn square_family_catalog() {
        assert_eq!(shapes(&GFilterSet::preset("square-1", 1).unwrap()), vec![(3, 3, 1)]);
        assert_eq!(
            shapes(&GFilterSet::preset("square-3", 1).unwrap()),
            vec![(1, 1, 1), (3, 3, 1), (5, 5, 1)]
        );
        assert_eq!(
            shapes(&GFilterSet::preset("square-5", 1).unwrap()),
            vec![(1, 1, 1), (2, 2, 1), (3, 3, 1), (4, 4, 1), (5, 5, 1)]
        );
    }

    #[test]
    fn mix_family_catalog() {
        assert_eq!(
            shapes(&GFilterSet::preset("mix-3", 1).unwrap()),
            vec![(1, 5, 1), (3, 3, 1), (5, 1, 1)]
        );
        assert_eq!(
            shapes(&GFilterSet::preset("mix-5", 1).unwrap()),
            vec![(1, 1, 1), (1, 5, 1), (3, 3, 1), (5, 1, 1), (5, 5, 1)]
        );
    }

    #[test]
    fn directional_families_enumerate_lengths() {
        assert_eq!(
            shapes(&GFilterSet::preset("horizon-4", 1).unwrap()),
            vec![(1, 1, 1), (1, 2, 1), (1, 3, 1), (1, 4, 1)]
        );
        assert_eq!(
            shapes(&GFilterSet::preset("vertical-3", 1).unwrap()),
            vec![(1, 1, 1), (2, 1, 1), (3, 1, 1)]
        );
    }

    #[test]
    fn simple_family_catalog() {
        assert_eq!(shapes(&GFilterSet::preset("simple-1", 1).unwrap()), vec![(2, 1, 1)]);
        assert_eq!(
            shapes(&GFilterSet::preset("simple-3", 1).unwrap()),
            vec![(1, 1, 1), (2, 1, 1), (2, 2, 1)]
        );
    }

    #[test]
    fn dilated_suffix_appends_addon() {
        let set = GFilterSet::preset("square-3-d", 2).unwrap();
        assert_eq!(
            shapes(&set),
            vec![(1, 1, 1), (3, 3, 1), (5, 5, 1), (5, 5, 2)]
        );
        assert!(set.specs.iter().all(|s| s.count == 2));
    }

    #[test]
    fn dilated_alone_is_rejected() {
        assert!(matches!(GFilterSet::preset("d", 1), Err(Error::DilatedStandalone)));
        assert!(matches!(GFilterSet::preset("-d", 1), Err(Error::DilatedStandalone)));
    }

    #[test]
    fn unknown_preset_is_rejected() {
        assert!(matches!(
            GFilterSet::preset("circle-3", 1),
            Err(Error::UnknownPreset(_))
        ));
        assert!(matches!(
            GFilterSet::preset("horizon-0", 1),
            Err(Error::UnknownPreset(_))
        ));
    }

    #[test]
    fn discard_rule_square5_on_2x16_keeps_small_squares() {
        let set = GFilterSet::preset("square-5", 1).unwrap();
        let kept = set.effective_specs(2, 16).unwrap();
        assert_eq!(
            kept.iter().map(|s| (s.rows, s.cols)).collect::<Vec<_>>(),
            vec![(1, 1), (2, 2)]
        );
    }

    #[test]
    fn discard_rule_counts_dilation() {
        // 5x5 with dilation 2 covers 9x9 cells: discarded on an 8x8 map.
        let set = GFilterSet::preset("square-1-d", 1).unwrap();
        let kept = set.effective_specs(8, 8).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!((kept[0].rows, kept[0].dilation), (3, 1));
        let dropped = set.discarded_specs(8, 8);
        assert_eq!(dropped.len(), 1);
        assert_eq!(dropped[0].label(), "5x5(d2)");
    }

    #[test]
    fn discarding_everything_is_an_error() {
        let set = GFilterSet::preset("square-1", 1).unwrap();
        let err = set.effective_specs(2, 2).unwrap_err();
        match err {
            Error::AllFiltersDiscarded { rows, cols, discarded } => {
                assert_eq!((rows, cols), (2, 2));
                assert!(discarded.contains("3x3"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn scan_extent_valid_stride_one() {
        let s = GFilterSpec::new(3, 3, 1, 1).unwrap();
        assert_eq!(s.scan_extent(4, 8), Some((2, 6)));
        let d = GFilterSpec::new(5, 5, 2, 1).unwrap();
        assert_eq!(d.effective_extent(), (9, 9));
        assert_eq!(d.scan_extent(8, 8), None);
        assert_eq!(d.scan_extent(9, 10), Some((1, 2)));
    }
}
