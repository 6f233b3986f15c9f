//! Rasterization of scenes into 19-channel layout-conditioning tensors.
//!
//! Channel layout per pixel: 10 depth-bin channels (one-hot occupancy of
//! projected box silhouettes), 3 box channels (category-colored wireframe
//! edges), 3 road channels (lane-colored polylines), 3 camera-pose
//! channels (ray-direction pseudo-color). Depth, box, and road channels
//! stay in [0, 1]; pose channels in [0, 255].

use nalgebra::{Matrix4, Vector4};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{project_camera_point, DirectionField};
use crate::scene::{CameraCalib, ObjectBox3D, SceneSequence};
use crate::threads;

pub const CHANNELS: usize = 19;
pub const DEPTH_BINS: usize = 10;
pub const BOX_CH: usize = 10;
pub const ROAD_CH: usize = 13;
pub const POSE_CH: usize = 16;

/// Camera-space clip plane for geometry straddling the image plane.
pub const CLIP_EPS: f64 = 1e-3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LayoutError {
    #[error("{what} index {got} out of range (< {bound})")]
    IndexOutOfRange {
        what: &'static str,
        got: usize,
        bound: usize,
    },
}

/// Color tables for box categories and lane types, values in [0, 1].
#[derive(Debug, Clone)]
pub struct Palette {
    pub categories: Vec<[f64; 3]>,
    pub lanes: [[f64; 3]; 3],
}

impl Default for Palette {
    fn default() -> Self {
        Palette {
            categories: vec![
                [1.0, 0.2, 0.2],
                [0.2, 1.0, 0.2],
                [0.2, 0.4, 1.0],
                [1.0, 1.0, 0.2],
                [1.0, 0.2, 1.0],
                [0.2, 1.0, 1.0],
                [1.0, 0.6, 0.2],
                [0.6, 0.2, 1.0],
                [0.6, 1.0, 0.4],
                [0.8, 0.8, 0.8],
            ],
            lanes: [
                [1.0, 0.5, 0.0], // divider
                [0.0, 1.0, 0.5], // boundary
                [0.4, 0.4, 1.0], // crossing
            ],
        }
    }
}

impl Palette {
    pub fn category_color(&self, category_id: u32) -> [f64; 3] {
        self.categories[(category_id as usize) % self.categories.len()]
    }

    pub fn lane_color(&self, lane: crate::scene::LaneType) -> [f64; 3] {
        match lane {
            crate::scene::LaneType::Divider => self.lanes[0],
            crate::scene::LaneType::Boundary => self.lanes[1],
            crate::scene::LaneType::Crossing => self.lanes[2],
        }
    }
}

/// Per-view, per-frame 19-channel conditioning tensor, dims (V, T, H, W, 19).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlTensor {
    pub views: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ControlTensor {
    pub fn dims(&self) -> [usize; 5] {
        [self.views, self.frames, self.height, self.width, CHANNELS]
    }

    #[inline]
    pub fn at(&self, v: usize, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[(((v * self.frames + t) * self.height + y) * self.width + x) * CHANNELS + c]
    }

    /// One (view, frame) slab of H*W*19 values.
    pub fn slice(&self, v: usize, t: usize) -> &[f32] {
        let stride = self.height * self.width * CHANNELS;
        let start = (v * self.frames + t) * stride;
        &self.data[start..start + stride]
    }

    /// Checks the per-group value-range invariants.
    pub fn ranges_ok(&self) -> bool {
        let hw = self.height * self.width;
        for slab in 0..self.views * self.frames {
            let base = slab * hw * CHANNELS;
            for p in 0..hw {
                let px = &self.data[base + p * CHANNELS..base + (p + 1) * CHANNELS];
                for (c, &val) in px.iter().enumerate() {
                    let hi = if c >= POSE_CH { 255.0 } else { 1.0 };
                    if !val.is_finite() || val < 0.0 || val > hi {
                        return false;
                    }
                }
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedEdge {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub depth_a: f64,
    pub depth_b: f64,
}

/// Clipped perspective projection of a 3D box.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedBox {
    pub edges: Vec<ProjectedEdge>,
    /// Nearest clipped-corner depth; the depth the whole silhouette is
    /// painted at.
    pub paint_depth: f64,
}

const BOX_EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 3),
    (3, 2),
    (2, 0),
    (4, 5),
    (5, 7),
    (7, 6),
    (6, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

fn box_corners(b: &ObjectBox3D) -> [Vector4<f64>; 8] {
    let (s, c) = b.yaw.sin_cos();
    let half = b.size / 2.0;
    let mut out = [Vector4::zeros(); 8];
    for (i, corner) in out.iter_mut().enumerate() {
        let sx = if i & 1 == 0 { -half.x } else { half.x };
        let sy = if i & 2 == 0 { -half.y } else { half.y };
        let sz = if i & 4 == 0 { -half.z } else { half.z };
        // Yaw about the vertical (z-up ego) axis.
        let x = b.center.x + c * sx - s * sy;
        let y = b.center.y + s * sx + c * sy;
        let z = b.center.z + sz;
        *corner = Vector4::new(x, y, z, 1.0);
    }
    out
}

/// Projects a box into one view; `None` when it is entirely behind the
/// image plane. Edges straddling the plane are clipped at depth
/// [`CLIP_EPS`].
pub fn project_box(
    b: &ObjectBox3D,
    calib: &CameraCalib,
    _width: usize,
    _height: usize,
) -> Option<ProjectedBox> {
    let e_inv = calib.extrinsic.try_inverse()?;
    let cam: Vec<Vector4<f64>> = box_corners(b).iter().map(|p| e_inv * p).collect();

    let mut edges = Vec::new();
    let mut min_depth = f64::INFINITY;
    for &(i, j) in &BOX_EDGES {
        let (mut p, mut q) = (cam[i], cam[j]);
        let (dp, dq) = (p.z, q.z);
        if dp < CLIP_EPS && dq < CLIP_EPS {
            continue;
        }
        if dp < CLIP_EPS || dq < CLIP_EPS {
            let t = (CLIP_EPS - dp) / (dq - dp);
            let cut = p + (q - p) * t;
            if dp < CLIP_EPS {
                p = cut;
            } else {
                q = cut;
            }
        }
        let (ua, va, da) = project_camera_point(&p, &calib.intrinsic);
        let (ub, vb, db) = project_camera_point(&q, &calib.intrinsic);
        min_depth = min_depth.min(da).min(db);
        edges.push(ProjectedEdge {
            a: [ua / da, va / da],
            b: [ub / db, vb / db],
            depth_a: da,
            depth_b: db,
        });
    }
    if edges.is_empty() {
        return None;
    }
    Some(ProjectedBox {
        edges,
        paint_depth: min_depth,
    })
}

/// Uniform depth bin over (0, d_max]; `None` when out of range.
pub fn bin_for_depth(depth: f64, d_max: f64) -> Option<usize> {
    if depth <= 0.0 || depth > d_max {
        return None;
    }
    Some(((depth / d_max * DEPTH_BINS as f64).floor() as usize).min(DEPTH_BINS - 1))
}

/// Rasterizes one (frame, view) into an H*W*19 slab, row-major (y, x, c).
pub fn rasterize_frame(
    scene: &SceneSequence,
    frame: usize,
    view: usize,
    width: usize,
    height: usize,
    d_max: f64,
    palette: &Palette,
) -> Result<Vec<f32>, LayoutError> {
    assert!(width >= 8 && height >= 8, "raster dims must be >= 8");
    assert!(d_max > 0.0, "d_max must be positive");
    if frame >= scene.frame_count() {
        return Err(LayoutError::IndexOutOfRange {
            what: "frame",
            got: frame,
            bound: scene.frame_count(),
        });
    }
    if view >= scene.view_count() {
        return Err(LayoutError::IndexOutOfRange {
            what: "view",
            got: view,
            bound: scene.view_count(),
        });
    }

    let f = &scene.frames[frame];
    let calib = &f.cameras[view];
    let mut out = vec![0.0f32; height * width * CHANNELS];

    // Pose channels from the per-pixel ray field. Calibration invariants
    // guarantee well-defined rays.
    let field = DirectionField::from_calib(width, height, calib).expect("validated calibration");
    for (i, dv) in field.directions.iter().enumerate() {
        let c = crate::geometry::pseudocolor(dv);
        out[i * CHANNELS + POSE_CH] = c[0] as f32;
        out[i * CHANNELS + POSE_CH + 1] = c[1] as f32;
        out[i * CHANNELS + POSE_CH + 2] = c[2] as f32;
    }

    // Roads: BEV polylines lifted to the z = 0 ground plane.
    if let Some(e_inv) = calib.extrinsic.try_inverse() {
        for road in &f.roads {
            let color = palette.lane_color(road.lane_type);
            for seg in road.points.windows(2) {
                let a = e_inv * Vector4::new(seg[0][0], seg[0][1], 0.0, 1.0);
                let b = e_inv * Vector4::new(seg[1][0], seg[1][1], 0.0, 1.0);
                if let Some((pa, pb)) = clip_project_segment(&a, &b, &calib.intrinsic) {
                    draw_line(&mut out, width, height, pa, pb, ROAD_CH, color);
                }
            }
        }
    }

    // Boxes: painter's order, farthest first, so the nearest box wins
    // every contested pixel.
    let mut projected: Vec<(usize, ProjectedBox)> = f
        .boxes
        .iter()
        .enumerate()
        .filter_map(|(i, b)| project_box(b, calib, width, height).map(|p| (i, p)))
        .collect();
    projected.sort_by(|a, b| {
        b.1.paint_depth
            .partial_cmp(&a.1.paint_depth)
            .unwrap()
            .then(b.0.cmp(&a.0))
    });

    for (bi, proj) in &projected {
        let color = palette.category_color(f.boxes[*bi].category_id);
        if let Some(bin) = bin_for_depth(proj.paint_depth, d_max) {
            fill_silhouette(&mut out, width, height, proj, bin);
        }
        for e in &proj.edges {
            draw_line(&mut out, width, height, e.a, e.b, BOX_CH, color);
        }
    }

    Ok(out)
}

/// Rasterizes the whole sequence, parallel over (frame, view) slabs.
pub fn render_sequence(
    scene: &SceneSequence,
    width: usize,
    height: usize,
    d_max: f64,
    palette: &Palette,
) -> Result<ControlTensor, LayoutError> {
    let views = scene.view_count();
    let frames = scene.frame_count();
    let slabs: Result<Vec<Vec<f32>>, LayoutError> = threads::pool().install(|| {
        (0..views * frames)
            .into_par_iter()
            .map(|i| rasterize_frame(scene, i % frames, i / frames, width, height, d_max, palette))
            .collect()
    });
    let slabs = slabs?;
    let mut data = Vec::with_capacity(views * frames * height * width * CHANNELS);
    for slab in slabs {
        data.extend_from_slice(&slab);
    }
    Ok(ControlTensor {
        views,
        frames,
        height,
        width,
        data,
    })
}

fn clip_project_segment(
    a: &Vector4<f64>,
    b: &Vector4<f64>,
    intrinsic: &Matrix4<f64>,
) -> Option<([f64; 2], [f64; 2])> {
    let (mut p, mut q) = (*a, *b);
    if p.z < CLIP_EPS && q.z < CLIP_EPS {
        return None;
    }
    if p.z < CLIP_EPS || q.z < CLIP_EPS {
        let t = (CLIP_EPS - p.z) / (q.z - p.z);
        let cut = p + (q - p) * t;
        if p.z < CLIP_EPS {
            p = cut;
        } else {
            q = cut;
        }
    }
    let (ua, va, da) = project_camera_point(&p, intrinsic);
    let (ub, vb, db) = project_camera_point(&q, intrinsic);
    Some(([ua / da, va / da], [ub / db, vb / db]))
}

/// Integer Bresenham between rounded endpoints; the segment is first
/// clipped to a small margin around the image so near-plane blowups do
/// not walk millions of pixels.
fn draw_line(
    out: &mut [f32],
    width: usize,
    height: usize,
    a: [f64; 2],
    b: [f64; 2],
    base_ch: usize,
    color: [f64; 3],
) {
    let margin = 2.0;
    let Some((a, b)) = clip_to_rect(
        a,
        b,
        -margin,
        -margin,
        width as f64 + margin,
        height as f64 + margin,
    ) else {
        return;
    };
    let (mut x0, mut y0) = (a[0].round() as i64, a[1].round() as i64);
    let (x1, y1) = (b[0].round() as i64, b[1].round() as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && (x0 as usize) < width && (y0 as usize) < height {
            let idx = (y0 as usize * width + x0 as usize) * CHANNELS + base_ch;
            out[idx] = color[0] as f32;
            out[idx + 1] = color[1] as f32;
            out[idx + 2] = color[2] as f32;
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Liang-Barsky segment clip against an axis-aligned rectangle.
fn clip_to_rect(
    a: [f64; 2],
    b: [f64; 2],
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
) -> Option<([f64; 2], [f64; 2])> {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for (p, q) in [
        (-dx, a[0] - xmin),
        (dx, xmax - a[0]),
        (-dy, a[1] - ymin),
        (dy, ymax - a[1]),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
            continue;
        }
        let r = q / p;
        if p < 0.0 {
            t0 = t0.max(r);
        } else {
            t1 = t1.min(r);
        }
        if t0 > t1 {
            return None;
        }
    }
    Some((
        [a[0] + t0 * dx, a[1] + t0 * dy],
        [a[0] + t1 * dx, a[1] + t1 * dy],
    ))
}

/// Paints the convex silhouette of a projected box into one depth bin,
/// clearing the other bins at covered pixels so occupancy stays one-hot.
fn fill_silhouette(out: &mut [f32], width: usize, height: usize, proj: &ProjectedBox, bin: usize) {
    let mut pts: Vec<[f64; 2]> = Vec::with_capacity(proj.edges.len() * 2);
    for e in &proj.edges {
        pts.push(e.a);
        pts.push(e.b);
    }
    let hull = convex_hull(&mut pts);
    if hull.len() < 3 {
        return;
    }
    let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
    let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in &hull {
        min_x = min_x.min(p[0]);
        max_x = max_x.max(p[0]);
        min_y = min_y.min(p[1]);
        max_y = max_y.max(p[1]);
    }
    let x_lo = min_x.floor().max(0.0) as usize;
    let x_hi = (max_x.ceil() as i64).min(width as i64 - 1);
    let y_lo = min_y.floor().max(0.0) as usize;
    let y_hi = (max_y.ceil() as i64).min(height as i64 - 1);
    if x_hi < 0 || y_hi < 0 {
        return;
    }
    for y in y_lo..=y_hi as usize {
        for x in x_lo..=x_hi as usize {
            if point_in_convex(&hull, x as f64, y as f64) {
                let idx = (y * width + x) * CHANNELS;
                for c in 0..DEPTH_BINS {
                    out[idx + c] = 0.0;
                }
                out[idx + bin] = 1.0;
            }
        }
    }
}

/// Andrew monotone chain; returns counter-clockwise hull vertices.
fn convex_hull(pts: &mut Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    let n = pts.len();
    if n < 3 {
        return pts.clone();
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * n);
    for &p in pts.iter() {
        while hull.len() >= 2
            && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
        {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev() {
        while hull.len() >= lower
            && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
        {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

fn point_in_convex(hull: &[[f64; 2]], x: f64, y: f64) -> bool {
    let n = hull.len();
    for i in 0..n {
        let a = hull[i];
        let b = hull[(i + 1) % n];
        let cross = (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
        if cross < 0.0 {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{LaneType, ObjectBox3D, RoadPolyline, SceneFrame};
    use nalgebra::{Matrix4, Vector3};

    fn pixel_calib(width: usize, height: usize) -> CameraCalib {
        // z-up ego frame, camera looking along +y, z = 0 ground plane.
        let mut k = Matrix4::identity();
        k[(0, 0)] = width as f64 / 2.0;
        k[(1, 1)] = width as f64 / 2.0;
        k[(0, 2)] = width as f64 / 2.0;
        k[(1, 2)] = height as f64 / 2.0;
        let e = Matrix4::from_row_slice(&[
            1.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, -1.0, 0.0, 1.6, //
            0.0, 0.0, 0.0, 1.0,
        ]);
        CameraCalib {
            intrinsic: k,
            extrinsic: e,
        }
    }

    fn box_ahead(depth: f64, side: f64) -> ObjectBox3D {
        ObjectBox3D {
            center: Vector3::new(0.0, depth, 0.8),
            size: Vector3::new(side, side, side),
            yaw: 0.0,
            category_id: 1,
            track_id: 1,
        }
    }

    fn one_frame_scene(boxes: Vec<ObjectBox3D>, roads: Vec<RoadPolyline>) -> SceneSequence {
        SceneSequence {
            frames: vec![SceneFrame {
                cameras: vec![pixel_calib(64, 32)],
                boxes,
                roads,
            }],
            attributes: vec![],
        }
    }

    #[test]
    fn box_behind_camera_is_empty() {
        let calib = pixel_calib(64, 32);
        let b = box_ahead(-10.0, 2.0);
        assert!(project_box(&b, &calib, 64, 32).is_none());
    }

    #[test]
    fn box_ahead_projects_symmetric_silhouette() {
        let calib = CameraCalib::identity();
        let b = ObjectBox3D {
            center: Vector3::new(0.0, 0.0, 10.0),
            size: Vector3::new(2.0, 2.0, 2.0),
            yaw: 0.0,
            category_id: 0,
            track_id: 0,
        };
        let proj = project_box(&b, &calib, 64, 64).unwrap();
        assert_eq!(proj.edges.len(), 12);
        assert!((proj.paint_depth - 9.0).abs() < 1e-9);
        // Identity K: corners at depth 9 project to +/-(1/9), depth 11 to
        // +/-(1/11); the center pixel (0,0) sits inside the silhouette.
        let mut pts: Vec<[f64; 2]> = Vec::new();
        for e in &proj.edges {
            pts.push(e.a);
            pts.push(e.b);
        }
        let hull = convex_hull(&mut pts);
        assert!(point_in_convex(&hull, 0.0, 0.0));
        for e in &proj.edges {
            assert!((e.a[0].abs() - 1.0 / 9.0).abs() < 1e-9 || (e.a[0].abs() - 1.0 / 11.0).abs() < 1e-9);
        }
    }

    #[test]
    fn straddling_box_clips_finite() {
        let calib = CameraCalib::identity();
        let b = ObjectBox3D {
            center: Vector3::new(0.0, 0.0, 0.5),
            size: Vector3::new(2.0, 2.0, 4.0),
            yaw: 0.0,
            category_id: 0,
            track_id: 0,
        };
        let proj = project_box(&b, &calib, 64, 64).unwrap();
        assert!(!proj.edges.is_empty());
        for e in &proj.edges {
            assert!(e.a.iter().chain(e.b.iter()).all(|v| v.is_finite()));
            assert!(e.depth_a >= CLIP_EPS - 1e-12 && e.depth_b >= CLIP_EPS - 1e-12);
        }
    }

    #[test]
    fn depth_binning() {
        assert_eq!(bin_for_depth(14.0, 50.0), Some(2));
        assert_eq!(bin_for_depth(50.0, 50.0), Some(9));
        assert_eq!(bin_for_depth(0.0, 50.0), None);
        assert_eq!(bin_for_depth(51.0, 50.0), None);
        assert_eq!(bin_for_depth(4.9, 50.0), Some(0));
    }

    #[test]
    fn bin_monotone_in_depth() {
        let mut prev = 0;
        for step in 1..100 {
            let d = step as f64 * 0.5;
            if let Some(bin) = bin_for_depth(d, 50.0) {
                assert!(bin >= prev, "bin decreased at depth {d}");
                prev = bin;
            }
        }
    }

    #[test]
    fn empty_scene_only_pose_channels() {
        let scene = one_frame_scene(vec![], vec![]);
        let slab = rasterize_frame(&scene, 0, 0, 64, 32, 50.0, &Palette::default()).unwrap();
        let field = DirectionField::from_calib(64, 32, &scene.frames[0].cameras[0]).unwrap();
        for (i, dv) in field.directions.iter().enumerate() {
            let px = &slab[i * CHANNELS..(i + 1) * CHANNELS];
            assert!(px[..POSE_CH].iter().all(|&v| v == 0.0));
            let c = crate::geometry::pseudocolor(dv);
            assert_eq!(px[POSE_CH], c[0] as f32);
            assert_eq!(px[POSE_CH + 1], c[1] as f32);
            assert_eq!(px[POSE_CH + 2], c[2] as f32);
        }
    }

    #[test]
    fn single_box_sets_one_depth_bin() {
        let scene = one_frame_scene(vec![box_ahead(14.0, 2.0)], vec![]);
        let slab = rasterize_frame(&scene, 0, 0, 64, 32, 50.0, &Palette::default()).unwrap();
        let mut covered = 0;
        for p in 0..64 * 32 {
            let px = &slab[p * CHANNELS..(p + 1) * CHANNELS];
            let hot: Vec<usize> = (0..DEPTH_BINS).filter(|&c| px[c] != 0.0).collect();
            if !hot.is_empty() {
                covered += 1;
                // Nearest face of a 2 m cube at 14 m is at 13 m: bin 2.
                assert_eq!(hot, vec![2], "pixel {p}");
            }
        }
        assert!(covered > 0, "silhouette painted nothing");
    }

    #[test]
    fn nearer_box_wins_overlap() {
        // Same silhouette: far box scaled 3x at 3x depth.
        let near = box_ahead(10.0, 2.0);
        let mut far = box_ahead(30.0, 6.0);
        far.category_id = 4;
        far.center.z = 2.4; // scale the vertical offset too
        let near_scene = one_frame_scene(vec![near.clone()], vec![]);
        let both_scene = one_frame_scene(vec![far, near], vec![]);
        let palette = Palette::default();
        let near_slab = rasterize_frame(&near_scene, 0, 0, 64, 32, 50.0, &palette).unwrap();
        let both_slab = rasterize_frame(&both_scene, 0, 0, 64, 32, 50.0, &palette).unwrap();
        let near_color = palette.category_color(1);
        let mut overlapping_edges = 0;
        for p in 0..64 * 32 {
            let near_px = &near_slab[p * CHANNELS..(p + 1) * CHANNELS];
            let both_px = &both_slab[p * CHANNELS..(p + 1) * CHANNELS];
            let near_depth_hot: Vec<usize> =
                (0..DEPTH_BINS).filter(|&c| near_px[c] != 0.0).collect();
            if !near_depth_hot.is_empty() {
                // Wherever the near box covers, the pair render must carry
                // the near box's bin.
                assert_eq!(
                    (0..DEPTH_BINS).filter(|&c| both_px[c] != 0.0).collect::<Vec<_>>(),
                    near_depth_hot,
                    "pixel {p}"
                );
            }
            if near_px[BOX_CH] != 0.0 {
                overlapping_edges += 1;
                assert_eq!(both_px[BOX_CH], near_color[0] as f32);
                assert_eq!(both_px[BOX_CH + 1], near_color[1] as f32);
                assert_eq!(both_px[BOX_CH + 2], near_color[2] as f32);
            }
        }
        assert!(overlapping_edges > 0);
    }

    #[test]
    fn road_paints_road_channels() {
        let road = RoadPolyline {
            points: vec![[-5.0, 2.0], [5.0, 30.0]],
            lane_type: LaneType::Boundary,
        };
        let scene = one_frame_scene(vec![], vec![road]);
        let slab = rasterize_frame(&scene, 0, 0, 64, 32, 50.0, &Palette::default()).unwrap();
        let color = Palette::default().lane_color(LaneType::Boundary);
        let painted = (0..64 * 32)
            .filter(|p| (0..3).any(|c| slab[p * CHANNELS + ROAD_CH + c] != 0.0))
            .count();
        assert!(painted > 0);
        // Painted pixels carry exactly the lane color in the road channels.
        for p in 0..64 * 32 {
            if slab[p * CHANNELS + ROAD_CH + 1] != 0.0 {
                for c in 0..3 {
                    assert_eq!(slab[p * CHANNELS + ROAD_CH + c], color[c] as f32);
                }
            }
        }
    }

    #[test]
    fn out_of_range_indices_error() {
        let scene = one_frame_scene(vec![], vec![]);
        assert!(matches!(
            rasterize_frame(&scene, 1, 0, 64, 32, 50.0, &Palette::default()),
            Err(LayoutError::IndexOutOfRange { what: "frame", .. })
        ));
        assert!(matches!(
            rasterize_frame(&scene, 0, 3, 64, 32, 50.0, &Palette::default()),
            Err(LayoutError::IndexOutOfRange { what: "view", .. })
        ));
    }

    #[test]
    fn render_sequence_shape_and_determinism() {
        let frame = SceneFrame {
            cameras: vec![pixel_calib(32, 16), pixel_calib(32, 16)],
            boxes: vec![box_ahead(12.0, 2.0)],
            roads: vec![],
        };
        let scene = SceneSequence {
            frames: vec![frame.clone(), frame.clone(), frame],
            attributes: vec![],
        };
        let a = render_sequence(&scene, 32, 16, 50.0, &Palette::default()).unwrap();
        assert_eq!(a.dims(), [2, 3, 16, 32, 19]);
        assert!(a.ranges_ok());
        let b = render_sequence(&scene, 32, 16, 50.0, &Palette::default()).unwrap();
        assert_eq!(a, b);
        // Static scene: identical slices for all frames.
        for v in 0..2 {
            for t in 1..3 {
                assert_eq!(a.slice(v, 0), a.slice(v, t));
            }
        }
    }
}
