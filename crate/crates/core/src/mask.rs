//! Label-map algebra: filtering raw segmenter masks, composing them into
//! objects, downscaling an object's map into a prompt-sized matrix, and
//! mapping a model's selection back to full-resolution pixels.
//!
//! Everything here is a pure function of its inputs.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Bbox, Grid, LabelMap, Mask};

/// Default long side of the matrix sent to the chat model.
pub const MATRIX_LONG_SIDE: usize = 20;

/// Default fraction of the image area below which a mask is treated as noise.
pub const MIN_AREA_FRACTION: f64 = 0.001;

/// Default bbox overlap ratio for attaching a segment to a larger parent.
pub const CONTAINMENT_THRESHOLD: f64 = 0.8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("segment id must be >= 1")]
    InvalidSegmentId,
    #[error("segment {0} has an empty mask")]
    EmptySegment(u32),
    #[error("duplicate segment id {0}")]
    DuplicateSegmentId(u32),
    #[error(
        "malformed segmenter output: segment {id} is {found_w}x{found_h}, expected {expected_w}x{expected_h}"
    )]
    DimensionMismatch {
        id: u32,
        expected_w: usize,
        expected_h: usize,
        found_w: usize,
        found_h: usize,
    },
    #[error("label map references unknown segment {0}")]
    UnknownSegment(u32),
    #[error("containment threshold {0} outside (0.5, 1.0]")]
    ThresholdOutOfRange(f64),
    #[error("label map has a zero dimension")]
    EmptyLabelMap,
    #[error("target long side must be >= 1")]
    InvalidTarget,
    #[error("label {0} is not a segment of this object")]
    UnknownLabel(u32),
    #[error("matrix coordinate ({x}, {y}) outside {cols}x{rows} matrix")]
    OutOfBounds {
        x: u32,
        y: u32,
        cols: usize,
        rows: usize,
    },
    #[error("matrix was not built from this object's label map")]
    MatrixMismatch,
    #[error("malformed matrix text: {0}")]
    MatrixSyntax(String),
}

/// One binary mask from the segmenter.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSegment {
    id: u32,
    mask: Mask,
    area: u64,
}

impl RawSegment {
    pub fn new(id: u32, mask: Mask) -> Result<Self, MaskError> {
        if id == 0 {
            return Err(MaskError::InvalidSegmentId);
        }
        let area = mask.count();
        if area == 0 {
            return Err(MaskError::EmptySegment(id));
        }
        Ok(Self { id, mask, area })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn area(&self) -> u64 {
        self.area
    }
}

/// A composed object. `label_map` covers `bbox` only; label `k` stands for
/// `member_segments[k - 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticObject {
    pub object_id: usize,
    #[serde(with = "crate::codec::label_png")]
    pub label_map: LabelMap,
    pub member_segments: Vec<u32>,
    pub bbox: Bbox,
    pub descriptor: String,
    pub image_width: usize,
    pub image_height: usize,
}

impl SemanticObject {
    pub fn label_count(&self) -> u32 {
        self.member_segments.len() as u32
    }

    pub fn area(&self) -> u64 {
        self.label_map.as_slice().iter().filter(|&&l| l != 0).count() as u64
    }

    /// Full-image mask of every pixel that belongs to the object.
    pub fn footprint(&self) -> Mask {
        self.full_mask(|l| l != 0)
    }

    fn full_mask(&self, keep: impl Fn(u32) -> bool) -> Mask {
        let mut out = Mask::filled(self.image_width, self.image_height, false);
        let (ox, oy) = (self.bbox.x1 as usize, self.bbox.y1 as usize);
        for (x, y, &l) in self.label_map.iter_xy() {
            if keep(l) {
                out.set(ox + x, oy + y, true);
            }
        }
        out
    }
}

/// Maps matrix indices back onto source indices. Cell `i` covers source
/// range `[i * source / target, (i + 1) * source / target)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scale {
    pub source: u32,
    pub target: u32,
}

impl Scale {
    pub fn identity(len: u32) -> Self {
        Self {
            source: len,
            target: len,
        }
    }

    pub fn block(&self, index: u32) -> std::ops::Range<usize> {
        let s = u64::from(self.source);
        let t = u64::from(self.target);
        let start = u64::from(index) * s / t;
        let end = (u64::from(index) + 1) * s / t;
        start as usize..end as usize
    }

    pub fn ratio(&self) -> f64 {
        f64::from(self.source) / f64::from(self.target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialMatrix {
    #[serde(with = "crate::codec::label_rows")]
    pub cells: LabelMap,
    pub scale_x: Scale,
    pub scale_y: Scale,
    /// Cell value to original segment id.
    pub legend: BTreeMap<u32, u32>,
}

impl SpatialMatrix {
    pub fn rows(&self) -> usize {
        self.cells.height()
    }

    pub fn cols(&self) -> usize {
        self.cells.width()
    }
}

/// A region named by the chat model in matrix coordinates (`x` is the
/// column, `y` the row).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetRegion {
    Point { x: u32, y: u32 },
    Rect { x1: u32, y1: u32, x2: u32, y2: u32 },
}

impl TargetRegion {
    fn cell_box(&self) -> Bbox {
        match *self {
            TargetRegion::Point { x, y } => Bbox::point(x, y),
            TargetRegion::Rect { x1, y1, x2, y2 } => Bbox::new(x1, y1, x2, y2).normalized(),
        }
    }
}

/// Keeps segments whose area is at least `min_area_fraction * image_area`.
pub fn filter_masks(
    segments: Vec<RawSegment>,
    image_area: u64,
    min_area_fraction: f64,
) -> Vec<RawSegment> {
    let min_area = min_area_fraction * image_area as f64;
    segments
        .into_iter()
        .filter(|s| s.area as f64 >= min_area)
        .collect()
}

/// Assigns each pixel to the smallest-area segment covering it (ties go to
/// the smaller id). Uncovered pixels are 0.
pub fn resolve_overlaps(
    width: usize,
    height: usize,
    segments: &[RawSegment],
) -> Result<LabelMap, MaskError> {
    let mut seen = BTreeSet::new();
    for s in segments {
        if !seen.insert(s.id) {
            return Err(MaskError::DuplicateSegmentId(s.id));
        }
        if s.mask.width() != width || s.mask.height() != height {
            return Err(MaskError::DimensionMismatch {
                id: s.id,
                expected_w: width,
                expected_h: height,
                found_w: s.mask.width(),
                found_h: s.mask.height(),
            });
        }
    }
    let mut order: Vec<&RawSegment> = segments.iter().collect();
    order.sort_by_key(|s| (s.area, s.id));

    let mut labels = LabelMap::filled(width, height, 0);
    for s in order {
        for (x, y, &on) in s.mask.iter_xy() {
            if on && *labels.get(x, y) == 0 {
                labels.set(x, y, s.id);
            }
        }
    }
    Ok(labels)
}

#[derive(Debug, Clone, Copy)]
struct SegmentStats {
    id: u32,
    area: u64,
    bbox: Bbox,
}

fn resolved_stats(label_map: &LabelMap) -> BTreeMap<u32, SegmentStats> {
    let mut stats: BTreeMap<u32, SegmentStats> = BTreeMap::new();
    for (x, y, &id) in label_map.iter_xy() {
        if id == 0 {
            continue;
        }
        let p = Bbox::point(x as u32, y as u32);
        stats
            .entry(id)
            .and_modify(|s| {
                s.area += 1;
                s.bbox = s.bbox.union(&p);
            })
            .or_insert(SegmentStats {
                id,
                area: 1,
                bbox: p,
            });
    }
    stats
}

/// Groups resolved segments into objects through a bbox-containment forest.
///
/// Segment A hangs under the smallest strictly larger segment B whose bbox
/// covers at least `containment_threshold` of A's bbox. Areas and boxes are
/// measured on the resolved `label_map`, so a segment that lost every pixel
/// to overlap resolution takes no part.
pub fn compose_objects(
    label_map: &LabelMap,
    segments: &[RawSegment],
    containment_threshold: f64,
) -> Result<Vec<SemanticObject>, MaskError> {
    if !(containment_threshold > 0.5 && containment_threshold <= 1.0) {
        return Err(MaskError::ThresholdOutOfRange(containment_threshold));
    }
    let known: BTreeSet<u32> = segments.iter().map(RawSegment::id).collect();
    let stats = resolved_stats(label_map);
    if let Some(id) = stats.keys().find(|id| !known.contains(id)) {
        return Err(MaskError::UnknownSegment(*id));
    }
    let nodes: Vec<SegmentStats> = stats.values().copied().collect();

    let parent: Vec<Option<usize>> = nodes
        .iter()
        .map(|a| {
            nodes
                .iter()
                .enumerate()
                .filter(|(_, b)| b.id != a.id && b.area > a.area)
                .filter(|(_, b)| {
                    let inter = a.bbox.intersection_area(&b.bbox) as f64;
                    inter / a.bbox.area() as f64 >= containment_threshold
                })
                .min_by_key(|(_, b)| (b.area, b.id))
                .map(|(j, _)| j)
        })
        .collect();

    // parent areas strictly increase, so every chain ends at a root
    let root_of = |mut i: usize| {
        while let Some(p) = parent[i] {
            i = p;
        }
        i
    };
    let mut groups: BTreeMap<usize, Vec<SegmentStats>> = BTreeMap::new();
    for (i, node) in nodes.iter().enumerate() {
        groups.entry(root_of(i)).or_default().push(*node);
    }

    let mut objects: Vec<(u64, u32, Vec<SegmentStats>)> = groups
        .into_iter()
        .map(|(root, mut members)| {
            members.sort_by(|a, b| b.area.cmp(&a.area).then(a.id.cmp(&b.id)));
            let total = members.iter().map(|m| m.area).sum();
            (total, nodes[root].id, members)
        })
        .collect();
    objects.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));

    Ok(objects
        .into_iter()
        .enumerate()
        .map(|(object_id, (_, _, members))| {
            let bbox = members
                .iter()
                .map(|m| m.bbox)
                .reduce(|a, b| a.union(&b))
                .expect("objects have at least one member");
            let relabel: HashMap<u32, u32> = members
                .iter()
                .enumerate()
                .map(|(k, m)| (m.id, k as u32 + 1))
                .collect();
            let local = LabelMap::from_fn(bbox.width() as usize, bbox.height() as usize, |x, y| {
                let id = *label_map.get(bbox.x1 as usize + x, bbox.y1 as usize + y);
                relabel.get(&id).copied().unwrap_or(0)
            });
            SemanticObject {
                object_id,
                label_map: local,
                member_segments: members.iter().map(|m| m.id).collect(),
                bbox,
                descriptor: String::new(),
                image_width: label_map.width(),
                image_height: label_map.height(),
            }
        })
        .collect())
}

/// Output `(rows, cols)` for a `height` x `width` source: the long side
/// becomes `min(target, long)` and the short side scales proportionally,
/// rounded half up, never below 1.
pub fn downscaled_shape(height: usize, width: usize, target_long_side: usize) -> (usize, usize) {
    let long = height.max(width);
    let short = height.min(width);
    let t = target_long_side.min(long);
    let scaled_short = ((2 * short * t + long) / (2 * long)).max(1);
    if height >= width {
        (t, scaled_short)
    } else {
        (scaled_short, t)
    }
}

/// Block-mode downscale. Each cell takes the most frequent label in its
/// source block; ties go to the smaller label. The legend is the identity
/// over the nonzero labels that survive.
pub fn downscale_label_map(
    label_map: &LabelMap,
    target_long_side: usize,
) -> Result<SpatialMatrix, MaskError> {
    if label_map.is_empty() {
        return Err(MaskError::EmptyLabelMap);
    }
    if target_long_side == 0 {
        return Err(MaskError::InvalidTarget);
    }
    let (h, w) = (label_map.height(), label_map.width());
    let (rows, cols) = downscaled_shape(h, w, target_long_side);
    let scale_y = Scale {
        source: h as u32,
        target: rows as u32,
    };
    let scale_x = Scale {
        source: w as u32,
        target: cols as u32,
    };

    let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
    let cells = LabelMap::from_fn(cols, rows, |c, r| {
        counts.clear();
        for y in scale_y.block(r as u32) {
            for &v in &label_map.row(y)[scale_x.block(c as u32)] {
                *counts.entry(v).or_insert(0) += 1;
            }
        }
        // ascending keys + strict comparison keeps the smaller label on ties
        let mut best = (0u32, 0u32);
        for (&label, &n) in &counts {
            if n > best.1 {
                best = (label, n);
            }
        }
        best.0
    });

    let legend = cells
        .as_slice()
        .iter()
        .filter(|&&v| v != 0)
        .map(|&v| (v, v))
        .collect();
    Ok(SpatialMatrix {
        cells,
        scale_x,
        scale_y,
        legend,
    })
}

/// Downscales an object's map, with the legend pointing at the original
/// segment ids.
pub fn downscale_object(
    object: &SemanticObject,
    target_long_side: usize,
) -> Result<SpatialMatrix, MaskError> {
    let mut matrix = downscale_label_map(&object.label_map, target_long_side)?;
    for (label, segment) in matrix.legend.iter_mut() {
        *segment = object.member_segments[*label as usize - 1];
    }
    Ok(matrix)
}

/// Renders the matrix in the prompt's text form: an opening `[` line, one
/// `[v1 v2 ...]` line per row, and the closing `]` directly after the last
/// row.
pub fn serialize_matrix(matrix: &SpatialMatrix) -> String {
    serialize_cells(&matrix.cells)
}

pub fn serialize_cells(cells: &LabelMap) -> String {
    let rows: Vec<String> = cells
        .rows()
        .map(|row| {
            let vals: Vec<String> = row.iter().map(u32::to_string).collect();
            format!("[{}]", vals.join(" "))
        })
        .collect();
    format!("[\n{}]", rows.join("\n"))
}

/// Parses matrix text back into cells. Accepts the closing bracket either
/// on the last row's line or on its own line.
pub fn parse_matrix(text: &str) -> Result<LabelMap, MaskError> {
    let syntax = |msg: &str| MaskError::MatrixSyntax(msg.to_string());
    let body = text
        .trim()
        .strip_prefix('[')
        .ok_or_else(|| syntax("missing opening bracket"))?
        .strip_suffix(']')
        .ok_or_else(|| syntax("missing closing bracket"))?;

    let mut rows = Vec::new();
    let mut rest = body.trim_start();
    while !rest.is_empty() {
        let inner = rest
            .strip_prefix('[')
            .ok_or_else(|| syntax("expected '[' at start of row"))?;
        let end = inner.find(']').ok_or_else(|| syntax("unterminated row"))?;
        let row = inner[..end]
            .split_whitespace()
            .map(|tok| {
                tok.parse::<u32>()
                    .map_err(|_| MaskError::MatrixSyntax(format!("bad cell {tok:?}")))
            })
            .collect::<Result<Vec<u32>, _>>()?;
        if row.is_empty() {
            return Err(syntax("empty row"));
        }
        rows.push(row);
        rest = inner[end + 1..].trim_start();
    }
    if rows.is_empty() {
        return Err(syntax("no rows"));
    }
    Grid::from_rows(rows).ok_or_else(|| syntax("ragged rows"))
}

/// Full-image mask of the pixels whose object label is in `selected`.
pub fn upscale_selection(object: &SemanticObject, selected: &[u32]) -> Result<Mask, MaskError> {
    let k = object.label_count();
    if let Some(&bad) = selected.iter().find(|&&l| l == 0 || l > k) {
        return Err(MaskError::UnknownLabel(bad));
    }
    let wanted: BTreeSet<u32> = selected.iter().copied().collect();
    Ok(object.full_mask(|l| wanted.contains(&l)))
}

/// Full-image mask covering the matrix cells named by `targets`, limited to
/// the object's footprint.
pub fn region_to_mask(
    object: &SemanticObject,
    matrix: &SpatialMatrix,
    targets: &[TargetRegion],
) -> Result<Mask, MaskError> {
    if matrix.scale_x.source as usize != object.label_map.width()
        || matrix.scale_y.source as usize != object.label_map.height()
        || matrix.scale_x.target as usize != matrix.cols()
        || matrix.scale_y.target as usize != matrix.rows()
    {
        return Err(MaskError::MatrixMismatch);
    }
    let mut out = Mask::filled(object.image_width, object.image_height, false);
    for target in targets {
        let cells = target.cell_box();
        for (x, y) in [(cells.x1, cells.y1), (cells.x2, cells.y2)] {
            if x as usize >= matrix.cols() || y as usize >= matrix.rows() {
                return Err(MaskError::OutOfBounds {
                    x,
                    y,
                    cols: matrix.cols(),
                    rows: matrix.rows(),
                });
            }
        }
        let ys = matrix.scale_y.block(cells.y1).start..matrix.scale_y.block(cells.y2).end;
        let xs = matrix.scale_x.block(cells.x1).start..matrix.scale_x.block(cells.x2).end;
        for ly in ys {
            for lx in xs.clone() {
                if *object.label_map.get(lx, ly) != 0 {
                    out.set(
                        object.bbox.x1 as usize + lx,
                        object.bbox.y1 as usize + ly,
                        true,
                    );
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect_mask(w: usize, h: usize, b: Bbox) -> Mask {
        Mask::from_fn(w, h, |x, y| b.contains(x as u32, y as u32))
    }

    fn seg(id: u32, w: usize, h: usize, b: Bbox) -> RawSegment {
        RawSegment::new(id, rect_mask(w, h, b)).unwrap()
    }

    fn segment_with_area(id: u32, area: usize) -> RawSegment {
        let mut m = Mask::filled(100, 100, false);
        for i in 0..area {
            m.set(i % 100, i / 100, true);
        }
        RawSegment::new(id, m).unwrap()
    }

    #[test]
    fn filter_drops_speck() {
        let segs = vec![
            segment_with_area(1, 5),
            segment_with_area(2, 4000),
            segment_with_area(3, 9000),
        ];
        // threshold: 0.001 * 10_000 = 10 pixels
        let kept = filter_masks(segs, 10_000, 0.001);
        let areas: Vec<u64> = kept.iter().map(RawSegment::area).collect();
        assert_eq!(areas, vec![4000, 9000]);
        assert_eq!(kept[0].id(), 2);
    }

    #[test]
    fn filter_edge_cases() {
        assert!(filter_masks(vec![], 100, 0.5).is_empty());
        let segs = vec![segment_with_area(4, 1), segment_with_area(9, 3)];
        assert_eq!(filter_masks(segs.clone(), 10_000, 0.0), segs);
    }

    #[test]
    fn raw_segment_rejects_empty_mask() {
        assert_eq!(
            RawSegment::new(3, Mask::filled(4, 4, false)),
            Err(MaskError::EmptySegment(3))
        );
        assert_eq!(
            RawSegment::new(0, Mask::filled(1, 1, true)),
            Err(MaskError::InvalidSegmentId)
        );
    }

    #[test]
    fn nested_masks_inner_wins() {
        // outer 10x10, inner 5x2
        let outer = seg(1, 10, 10, Bbox::new(0, 0, 9, 9));
        let inner = seg(2, 10, 10, Bbox::new(2, 2, 6, 3));
        let labels = resolve_overlaps(10, 10, &[outer, inner]).unwrap();
        let count = |id| labels.as_slice().iter().filter(|&&l| l == id).count();
        assert_eq!(count(2), 10);
        assert_eq!(count(1), 90);
    }

    #[test]
    fn duplicate_masks_go_to_smaller_id() {
        let b = Bbox::new(1, 1, 3, 3);
        let labels = resolve_overlaps(5, 5, &[seg(7, 5, 5, b), seg(4, 5, 5, b)]).unwrap();
        assert!(labels.iter_xy().all(|(x, y, &l)| {
            if b.contains(x as u32, y as u32) {
                l == 4
            } else {
                l == 0
            }
        }));
    }

    #[test]
    fn mismatched_mask_dimensions_rejected() {
        let err = resolve_overlaps(
            5,
            5,
            &[seg(1, 5, 5, Bbox::new(0, 0, 1, 1)), seg(2, 6, 5, Bbox::new(0, 0, 1, 1))],
        )
        .unwrap_err();
        assert!(matches!(err, MaskError::DimensionMismatch { id: 2, .. }));
    }

    #[test]
    fn door_with_parts_composes_to_one_object() {
        let (w, h) = (40, 80);
        let panel = seg(1, w, h, Bbox::new(0, 0, 39, 79));
        let handle = seg(2, w, h, Bbox::new(30, 35, 34, 44));
        let hinge = seg(3, w, h, Bbox::new(1, 10, 3, 15));
        let segs = vec![hinge, panel, handle];
        let labels = resolve_overlaps(w, h, &segs).unwrap();
        let objects = compose_objects(&labels, &segs, 0.8).unwrap();
        assert_eq!(objects.len(), 1);
        let door = &objects[0];
        assert_eq!(door.label_count(), 3);
        assert_eq!(door.member_segments, vec![1, 2, 3]);
        assert_eq!(door.bbox, Bbox::new(0, 0, 39, 79));
    }

    #[test]
    fn disjoint_segments_stay_separate() {
        let a = seg(1, 30, 10, Bbox::new(0, 0, 9, 9));
        let b = seg(2, 30, 10, Bbox::new(20, 0, 24, 4));
        let segs = vec![a, b];
        let labels = resolve_overlaps(30, 10, &segs).unwrap();
        let objects = compose_objects(&labels, &segs, 0.8).unwrap();
        assert_eq!(objects.len(), 2);
        assert_eq!(objects[0].member_segments, vec![1]);
        assert_eq!(objects[1].member_segments, vec![2]);
        assert_eq!(objects[1].object_id, 1);
    }

    #[test]
    fn mug_handle_partial_overlap_joins_body() {
        // handle is 10 columns wide with one column outside the body: 9/10
        let (w, h) = (40, 20);
        let body = seg(5, w, h, Bbox::new(0, 0, 19, 19));
        let handle = seg(9, w, h, Bbox::new(11, 5, 20, 9));
        let handle_box = Bbox::new(11, 5, 20, 9);
        let ratio = handle_box.intersection_area(&Bbox::new(0, 0, 19, 19)) as f64
            / handle_box.area() as f64;
        assert!((ratio - 0.9).abs() < 1e-12);
        let segs = vec![body, handle];
        let labels = resolve_overlaps(w, h, &segs).unwrap();
        let objects = compose_objects(&labels, &segs, 0.8).unwrap();
        assert_eq!(objects.len(), 1);
        assert_eq!(objects[0].member_segments, vec![5, 9]);
        // the handle pixel outside the body is labelled 2
        let local_x = 20 - objects[0].bbox.x1 as usize;
        assert_eq!(*objects[0].label_map.get(local_x, 5), 2);
    }

    #[test]
    fn threshold_out_of_range() {
        let labels = LabelMap::filled(2, 2, 0);
        assert!(matches!(
            compose_objects(&labels, &[], 0.5),
            Err(MaskError::ThresholdOutOfRange(_))
        ));
    }

    #[test]
    fn downscale_dimensions() {
        let lm = LabelMap::filled(200, 440, 1);
        let m = downscale_label_map(&lm, 20).unwrap();
        assert_eq!((m.rows(), m.cols()), (20, 9));
        assert!(m.cells.as_slice().iter().all(|&v| v == 1));
        assert_eq!(m.scale_y, Scale { source: 440, target: 20 });
        assert_eq!(m.scale_x, Scale { source: 200, target: 9 });
    }

    #[test]
    fn downscale_identity_when_already_small() {
        let lm = LabelMap::from_fn(10, 20, |x, y| ((x * 7 + y * 3) % 5) as u32);
        let m = downscale_label_map(&lm, 20).unwrap();
        assert_eq!(m.cells, lm);
        assert_eq!(m.scale_x.ratio(), 1.0);
        assert_eq!(m.scale_y.ratio(), 1.0);
    }

    #[test]
    fn downscale_tie_prefers_smaller_label() {
        // 2x2 block with two 3s and two 1s
        let lm = Grid::from_rows(vec![vec![3, 1], vec![1, 3]]).unwrap();
        let m = downscale_label_map(&lm, 1).unwrap();
        assert_eq!(m.cells.as_slice(), &[1]);
    }

    #[test]
    fn downscale_rejects_empty() {
        let lm = LabelMap::filled(0, 3, 0);
        assert_eq!(downscale_label_map(&lm, 20), Err(MaskError::EmptyLabelMap));
        let lm = LabelMap::filled(1, 1, 0);
        assert_eq!(downscale_label_map(&lm, 0), Err(MaskError::InvalidTarget));
    }

    #[test]
    fn serialize_small_matrices() {
        let cells = Grid::from_rows(vec![vec![0, 1, 1], vec![1, 1, 0]]).unwrap();
        assert_eq!(serialize_cells(&cells), "[\n[0 1 1]\n[1 1 0]]");
        let one = Grid::from_rows(vec![vec![7]]).unwrap();
        assert_eq!(serialize_cells(&one), "[\n[7]]");
    }

    #[test]
    fn parse_matrix_accepts_both_closings() {
        let a = parse_matrix("[\n[0 1 1]\n[1 1 0]]").unwrap();
        let b = parse_matrix("[\n[0 1 1]\n[1 1 0]\n]").unwrap();
        assert_eq!(a, b);
        assert!(parse_matrix("[\n[0 1]\n[1]]").is_err());
        assert!(parse_matrix("[]").is_err());
        assert!(parse_matrix("[\n[a b]]").is_err());
    }

    fn two_part_object() -> SemanticObject {
        let (w, h) = (12, 12);
        let body = seg(1, w, h, Bbox::new(2, 2, 9, 9));
        let part = seg(2, w, h, Bbox::new(3, 7, 8, 8));
        let segs = vec![body, part];
        let labels = resolve_overlaps(w, h, &segs).unwrap();
        compose_objects(&labels, &segs, 0.8).unwrap().remove(0)
    }

    #[test]
    fn upscale_selection_cases() {
        let obj = two_part_object();
        let none = upscale_selection(&obj, &[]).unwrap();
        assert_eq!(none.count(), 0);
        let all = upscale_selection(&obj, &[1, 2]).unwrap();
        assert_eq!(all, obj.footprint());
        let part = upscale_selection(&obj, &[2]).unwrap();
        assert_eq!(part.count(), 12);
        assert_eq!(part.bbox(), Some(Bbox::new(3, 7, 8, 8)));
        assert_eq!(upscale_selection(&obj, &[3]), Err(MaskError::UnknownLabel(3)));
        assert_eq!(upscale_selection(&obj, &[0]), Err(MaskError::UnknownLabel(0)));
    }

    #[test]
    fn region_point_and_bounds() {
        let obj = two_part_object();
        let matrix = downscale_object(&obj, 4).unwrap();
        assert_eq!((matrix.rows(), matrix.cols()), (4, 4));
        // 8x8 object, 2x2 pixel blocks; cell (1, 3) -> local cols 2..4, rows 6..8
        let m = region_to_mask(&obj, &matrix, &[TargetRegion::Point { x: 1, y: 3 }]).unwrap();
        assert_eq!(m.count(), 4);
        assert_eq!(m.bbox(), Some(Bbox::new(4, 8, 5, 9)));
        let err = region_to_mask(&obj, &matrix, &[TargetRegion::Point { x: 4, y: 0 }]);
        assert!(matches!(err, Err(MaskError::OutOfBounds { x: 4, .. })));
        assert_eq!(region_to_mask(&obj, &matrix, &[]).unwrap().count(), 0);
    }

    #[test]
    fn legend_points_at_original_ids() {
        let obj = two_part_object();
        let matrix = downscale_object(&obj, 20).unwrap();
        assert_eq!(matrix.legend, BTreeMap::from([(1, 1), (2, 2)]));
    }
}
