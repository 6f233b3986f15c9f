//! BEV annotation data model and scene-file parsing.
//!
//! A scene file is a JSON document carrying per-frame camera calibrations,
//! 3D object boxes, road polylines, and free-text attribute tags. Parsing
//! validates every structural invariant (matrix invertibility, view-count
//! consistency, value ranges) and reports the offending JSON path.

use nalgebra::{Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeededRng;

/// Homogeneous 4x4 intrinsic and extrinsic calibration.
///
/// The extrinsic maps camera coordinates to ego/world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraCalib {
    pub intrinsic: Matrix4<f64>,
    pub extrinsic: Matrix4<f64>,
}

pub const MIN_CALIB_DET: f64 = 1e-9;

impl CameraCalib {
    pub fn identity() -> Self {
        CameraCalib {
            intrinsic: Matrix4::identity(),
            extrinsic: Matrix4::identity(),
        }
    }

    /// Checks invertibility and the homogeneous bottom row of both matrices.
    pub fn validate(&self) -> Result<(), String> {
        for (name, m) in [("intrinsic", &self.intrinsic), ("extrinsic", &self.extrinsic)] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(format!("{name}: non-finite entries"));
            }
            let bottom = m.row(3);
            if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 0.0 || bottom[3] != 1.0 {
                return Err(format!("{name}: bottom row must be (0,0,0,1)"));
            }
            let det = m.determinant();
            if det.abs() <= MIN_CALIB_DET {
                return Err(format!("{name}: singular matrix (|det| = {:.3e})", det.abs()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LaneType {
    Divider,
    Boundary,
    Crossing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectBox3D {
    /// Center in ego/world coordinates, meters.
    pub center: Vector3<f64>,
    /// (length, width, height), meters; strictly positive.
    pub size: Vector3<f64>,
    /// Heading about the vertical axis, radians in [-pi, pi).
    pub yaw: f64,
    pub category_id: u32,
    pub track_id: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadPolyline {
    /// Ground-plane BEV points (x, y) in meters; z = 0 when lifted to 3D.
    pub points: Vec<[f64; 2]>,
    pub lane_type: LaneType,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    pub cameras: Vec<CameraCalib>,
    pub boxes: Vec<ObjectBox3D>,
    pub roads: Vec<RoadPolyline>,
}

/// Validated annotation sequence: T frames, each with the same V views.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSequence {
    pub frames: Vec<SceneFrame>,
    pub attributes: Vec<String>,
}

impl SceneSequence {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn view_count(&self) -> usize {
        self.frames[0].cameras.len()
    }
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("syntax error at line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("schema error at {path}: {msg}")]
    Schema { path: String, msg: String },
    #[error("invariant violation at {path}: {msg}")]
    Invariant { path: String, msg: String },
}

// Raw serde mirror of the file schema. Keys are bit-exact; unknown keys
// and unknown enum values are rejected.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScene {
    views: usize,
    frames: Vec<RawFrame>,
    attributes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFrame {
    cameras: Vec<RawCamera>,
    boxes: Vec<RawBox>,
    roads: Vec<RawRoad>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCamera {
    intrinsic: Vec<f64>,
    extrinsic: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBox {
    center: Vec<f64>,
    size: Vec<f64>,
    yaw: f64,
    category_id: u32,
    track_id: i64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRoad {
    points: Vec<Vec<f64>>,
    lane_type: String,
}

/// Parses and fully validates a scene file.
pub fn parse_scene(text: &str) -> Result<SceneSequence, SceneError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let raw: RawScene = serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner();
        let (line, col) = (inner.line(), inner.column());
        if inner.is_syntax() || inner.is_eof() {
            SceneError::Syntax {
                line,
                col,
                msg: inner.to_string(),
            }
        } else {
            SceneError::Schema {
                path: e.path().to_string(),
                msg: inner.to_string(),
            }
        }
    })?;
    validate(raw)
}

fn validate(raw: RawScene) -> Result<SceneSequence, SceneError> {
    let inv = |path: &str, msg: String| SceneError::Invariant {
        path: path.to_string(),
        msg,
    };
    let schema = |path: &str, msg: String| SceneError::Schema {
        path: path.to_string(),
        msg,
    };

    if raw.views < 1 {
        return Err(inv("views", "view count must be >= 1".into()));
    }
    if raw.frames.is_empty() {
        return Err(inv("frames", "at least one frame required".into()));
    }

    let mut frames = Vec::with_capacity(raw.frames.len());
    for (fi, frame) in raw.frames.into_iter().enumerate() {
        let fpath = format!("frames[{fi}]");
        if frame.cameras.len() != raw.views {
            return Err(inv(
                &format!("{fpath}.cameras"),
                format!("expected {} cameras, got {}", raw.views, frame.cameras.len()),
            ));
        }

        let mut cameras = Vec::with_capacity(frame.cameras.len());
        for (ci, cam) in frame.cameras.into_iter().enumerate() {
            let cpath = format!("{fpath}.cameras[{ci}]");
            let intrinsic = matrix_from_flat(&cam.intrinsic)
                .map_err(|m| schema(&format!("{cpath}.intrinsic"), m))?;
            let extrinsic = matrix_from_flat(&cam.extrinsic)
                .map_err(|m| schema(&format!("{cpath}.extrinsic"), m))?;
            let calib = CameraCalib {
                intrinsic,
                extrinsic,
            };
            calib.validate().map_err(|m| inv(&cpath, m))?;
            cameras.push(calib);
        }

        let mut boxes = Vec::with_capacity(frame.boxes.len());
        for (bi, b) in frame.boxes.into_iter().enumerate() {
            let bpath = format!("{fpath}.boxes[{bi}]");
            let center =
                vec3_from_flat(&b.center).map_err(|m| schema(&format!("{bpath}.center"), m))?;
            let size = vec3_from_flat(&b.size).map_err(|m| schema(&format!("{bpath}.size"), m))?;
            if size.iter().any(|&v| v <= 0.0) {
                return Err(inv(
                    &format!("{bpath}.size"),
                    "all size components must be strictly positive".into(),
                ));
            }
            if !b.yaw.is_finite() || b.yaw < -std::f64::consts::PI || b.yaw >= std::f64::consts::PI
            {
                return Err(inv(
                    &format!("{bpath}.yaw"),
                    format!("yaw {} outside [-pi, pi)", b.yaw),
                ));
            }
            boxes.push(ObjectBox3D {
                center,
                size,
                yaw: b.yaw,
                category_id: b.category_id,
                track_id: b.track_id,
            });
        }

        let mut roads = Vec::with_capacity(frame.roads.len());
        for (ri, r) in frame.roads.into_iter().enumerate() {
            let rpath = format!("{fpath}.roads[{ri}]");
            let lane_type = match r.lane_type.as_str() {
                "divider" => LaneType::Divider,
                "boundary" => LaneType::Boundary,
                "crossing" => LaneType::Crossing,
                other => {
                    return Err(schema(
                        &format!("{rpath}.lane_type"),
                        format!("unknown lane type \"{other}\""),
                    ))
                }
            };
            if r.points.len() < 2 {
                return Err(inv(
                    &format!("{rpath}.points"),
                    format!("polyline needs >= 2 points, got {}", r.points.len()),
                ));
            }
            let mut points = Vec::with_capacity(r.points.len());
            for (pi, p) in r.points.iter().enumerate() {
                if p.len() != 2 {
                    return Err(schema(
                        &format!("{rpath}.points[{pi}]"),
                        format!("expected [x, y], got {} values", p.len()),
                    ));
                }
                if !p[0].is_finite() || !p[1].is_finite() {
                    return Err(inv(
                        &format!("{rpath}.points[{pi}]"),
                        "non-finite coordinate".into(),
                    ));
                }
                points.push([p[0], p[1]]);
            }
            roads.push(RoadPolyline { points, lane_type });
        }

        frames.push(SceneFrame {
            cameras,
            boxes,
            roads,
        });
    }

    Ok(SceneSequence {
        frames,
        attributes: raw.attributes,
    })
}

fn matrix_from_flat(values: &[f64]) -> Result<Matrix4<f64>, String> {
    if values.len() != 16 {
        return Err(format!("expected 16 row-major values, got {}", values.len()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err("non-finite entries".into());
    }
    Ok(Matrix4::from_row_slice(values))
}

fn vec3_from_flat(values: &[f64]) -> Result<Vector3<f64>, String> {
    if values.len() != 3 {
        return Err(format!("expected 3 values, got {}", values.len()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err("non-finite entries".into());
    }
    Ok(Vector3::new(values[0], values[1], values[2]))
}

/// Serializes a scene to the JSON file format; `parse_scene` of the result
/// reproduces the input field-exactly.
pub fn serialize_scene(scene: &SceneSequence) -> String {
    let raw = RawScene {
        views: scene.view_count(),
        frames: scene
            .frames
            .iter()
            .map(|f| RawFrame {
                cameras: f
                    .cameras
                    .iter()
                    .map(|c| RawCamera {
                        intrinsic: matrix_to_flat(&c.intrinsic),
                        extrinsic: matrix_to_flat(&c.extrinsic),
                    })
                    .collect(),
                boxes: f
                    .boxes
                    .iter()
                    .map(|b| RawBox {
                        center: vec![b.center.x, b.center.y, b.center.z],
                        size: vec![b.size.x, b.size.y, b.size.z],
                        yaw: b.yaw,
                        category_id: b.category_id,
                        track_id: b.track_id,
                    })
                    .collect(),
                roads: f
                    .roads
                    .iter()
                    .map(|r| RawRoad {
                        points: r.points.iter().map(|p| vec![p[0], p[1]]).collect(),
                        lane_type: match r.lane_type {
                            LaneType::Divider => "divider",
                            LaneType::Boundary => "boundary",
                            LaneType::Crossing => "crossing",
                        }
                        .to_string(),
                    })
                    .collect(),
            })
            .collect(),
        attributes: scene.attributes.clone(),
    };
    serde_json::to_string_pretty(&raw).expect("raw scene serializes")
}

fn matrix_to_flat(m: &Matrix4<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(16);
    for r in 0..4 {
        for c in 0..4 {
            out.push(m[(r, c)]);
        }
    }
    out
}

// Text-attribute conditioning. Pretrained text encoders are out of scope;
// a seeded hash-bucket table keeps the pathway deterministic: each tag
// maps to a vocabulary bucket (unknown tags share a reserved bucket), the
// bucket rows are summed and the result normalized to unit length.

const ATTRIBUTE_VOCAB: &[&str] = &[
    "sunny", "rainy", "cloudy", "snowy", "foggy", "day", "night", "dawn", "dusk", "urban",
    "suburban", "highway", "intersection", "parking", "rural",
];

const EMBED_TABLE_SEED: u64 = 0x7061_6e6f_7261_6d61;

fn tag_bucket(tag: &str) -> usize {
    ATTRIBUTE_VOCAB
        .iter()
        .position(|&v| v == tag)
        .unwrap_or(ATTRIBUTE_VOCAB.len())
}

/// Deterministic fixed-length embedding of attribute tags, unit Euclidean
/// norm. Pure function of (tags, dim); unknown tags share one bucket.
pub fn text_attribute_embedding(tags: &[String], dim: usize) -> Vec<f64> {
    assert!(dim >= 1, "embedding dim must be >= 1");
    let table = SeededRng::new(EMBED_TABLE_SEED);
    let row = |bucket: usize| table.normal_tensor(&format!("attr/{bucket}/{dim}"), &[dim]);

    let mut acc = vec![0.0; dim];
    if tags.is_empty() {
        for (a, b) in acc.iter_mut().zip(row(ATTRIBUTE_VOCAB.len()).data()) {
            *a += b;
        }
    } else {
        for tag in tags {
            for (a, b) in acc.iter_mut().zip(row(tag_bucket(tag)).data()) {
                *a += b;
            }
        }
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        // Opposed unknown/known rows cancelling exactly is not reachable
        // with continuous draws, but fall back to the reserved row anyway.
        let r = row(ATTRIBUTE_VOCAB.len());
        let n = r.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        return r.data().iter().map(|v| v / n).collect();
    }
    acc.iter().map(|v| v / norm).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn minimal_scene_json() -> String {
        let identity: Vec<f64> = (0..4)
            .flat_map(|r| (0..4).map(move |c| if r == c { 1.0 } else { 0.0 }))
            .collect();
        serde_json::json!({
            "views": 1,
            "frames": [{
                "cameras": [{"intrinsic": identity, "extrinsic": identity}],
                "boxes": [],
                "roads": []
            }],
            "attributes": []
        })
        .to_string()
    }

    fn six_view_scene_json(frames: usize) -> String {
        let identity: Vec<f64> = (0..4)
            .flat_map(|r| (0..4).map(move |c| if r == c { 1.0 } else { 0.0 }))
            .collect();
        let cam = serde_json::json!({"intrinsic": identity, "extrinsic": identity});
        let frame = serde_json::json!({
            "cameras": vec![cam; 6],
            "boxes": [{"center": [1.0, 2.0, 10.0], "size": [4.0, 2.0, 1.5],
                       "yaw": 0.5, "category_id": 2, "track_id": 7}],
            "roads": [{"points": [[0.0, 0.0], [5.0, 5.0]], "lane_type": "divider"}]
        });
        serde_json::json!({
            "views": 6,
            "frames": vec![frame; frames],
            "attributes": ["rainy", "night"]
        })
        .to_string()
    }

    #[test]
    fn parses_minimal_scene() {
        let s = parse_scene(&minimal_scene_json()).unwrap();
        assert_eq!(s.frame_count(), 1);
        assert_eq!(s.view_count(), 1);
        assert!(s.frames[0].boxes.is_empty());
    }

    #[test]
    fn parses_six_view_eight_frame_scene() {
        let s = parse_scene(&six_view_scene_json(8)).unwrap();
        assert_eq!(s.frame_count(), 8);
        assert_eq!(s.view_count(), 6);
    }

    #[test]
    fn rejects_mismatched_view_counts() {
        let mut v: serde_json::Value = serde_json::from_str(&six_view_scene_json(2)).unwrap();
        v["frames"][1]["cameras"]
            .as_array_mut()
            .unwrap()
            .pop()
            .unwrap();
        let err = parse_scene(&v.to_string()).unwrap_err();
        match err {
            SceneError::Invariant { path, .. } => assert_eq!(path, "frames[1].cameras"),
            other => panic!("expected invariant violation, got {other}"),
        }
    }

    #[test]
    fn syntax_error_reports_line_and_column() {
        let text = "{\n  \"views\": 1,\n  oops\n}";
        match parse_scene(text).unwrap_err() {
            SceneError::Syntax { line, col, .. } => {
                assert_eq!(line, 3);
                assert!(col > 0);
            }
            other => panic!("expected syntax error, got {other}"),
        }
    }

    #[test]
    fn missing_field_names_path() {
        let mut v: serde_json::Value = serde_json::from_str(&six_view_scene_json(1)).unwrap();
        v["frames"][0]["boxes"][0]
            .as_object_mut()
            .unwrap()
            .remove("yaw");
        match parse_scene(&v.to_string()).unwrap_err() {
            SceneError::Schema { path, msg } => {
                assert!(path.contains("frames[0].boxes[0]"), "path {path}");
                assert!(msg.contains("yaw"), "msg {msg}");
            }
            other => panic!("expected schema error, got {other}"),
        }
    }

    #[test]
    fn wrong_matrix_arity_names_path() {
        let mut v: serde_json::Value = serde_json::from_str(&minimal_scene_json()).unwrap();
        v["frames"][0]["cameras"][0]["intrinsic"]
            .as_array_mut()
            .unwrap()
            .pop();
        match parse_scene(&v.to_string()).unwrap_err() {
            SceneError::Schema { path, msg } => {
                assert_eq!(path, "frames[0].cameras[0].intrinsic");
                assert!(msg.contains("15"));
            }
            other => panic!("expected schema error, got {other}"),
        }
    }

    #[test]
    fn singular_matrix_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&minimal_scene_json()).unwrap();
        v["frames"][0]["cameras"][0]["intrinsic"][0] = serde_json::json!(0.0);
        match parse_scene(&v.to_string()).unwrap_err() {
            SceneError::Invariant { path, msg } => {
                assert_eq!(path, "frames[0].cameras[0]");
                assert!(msg.contains("singular"));
            }
            other => panic!("expected invariant violation, got {other}"),
        }
    }

    #[test]
    fn unknown_lane_type_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&six_view_scene_json(1)).unwrap();
        v["frames"][0]["roads"][0]["lane_type"] = serde_json::json!("sidewalk");
        assert!(matches!(
            parse_scene(&v.to_string()),
            Err(SceneError::Schema { .. })
        ));
    }

    #[test]
    fn yaw_range_enforced() {
        let mut v: serde_json::Value = serde_json::from_str(&six_view_scene_json(1)).unwrap();
        v["frames"][0]["boxes"][0]["yaw"] = serde_json::json!(std::f64::consts::PI);
        assert!(matches!(
            parse_scene(&v.to_string()),
            Err(SceneError::Invariant { .. })
        ));
    }

    #[test]
    fn roundtrip_is_field_exact() {
        let s = parse_scene(&six_view_scene_json(3)).unwrap();
        let back = parse_scene(&serialize_scene(&s)).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn deleting_any_required_key_fails_parse() {
        // Fuzz over every object key in the document: removing any one of
        // them must break parsing.
        let text = six_view_scene_json(2);
        let root: serde_json::Value = serde_json::from_str(&text).unwrap();
        let mut paths = Vec::new();
        collect_object_keys(&root, &mut Vec::new(), &mut paths);
        assert!(!paths.is_empty());
        for path in paths {
            let mut v = root.clone();
            remove_at(&mut v, &path);
            assert!(
                parse_scene(&v.to_string()).is_err(),
                "deleting {path:?} should fail"
            );
        }
    }

    fn collect_object_keys(
        v: &serde_json::Value,
        prefix: &mut Vec<String>,
        out: &mut Vec<Vec<String>>,
    ) {
        match v {
            serde_json::Value::Object(map) => {
                for (k, child) in map {
                    prefix.push(k.clone());
                    out.push(prefix.clone());
                    collect_object_keys(child, prefix, out);
                    prefix.pop();
                }
            }
            serde_json::Value::Array(items) => {
                for (i, child) in items.iter().enumerate() {
                    prefix.push(format!("#{i}"));
                    collect_object_keys(child, prefix, out);
                    prefix.pop();
                }
            }
            _ => {}
        }
    }

    fn remove_at(v: &mut serde_json::Value, path: &[String]) {
        let (last, rest) = path.split_last().unwrap();
        let mut cur = v;
        for seg in rest {
            cur = if let Some(idx) = seg.strip_prefix('#') {
                &mut cur[idx.parse::<usize>().unwrap()]
            } else {
                &mut cur[seg.as_str()]
            };
        }
        cur.as_object_mut().unwrap().remove(last);
    }

    #[test]
    fn embedding_is_deterministic_and_unit_norm() {
        let tags = vec!["rainy".to_string()];
        let a = text_attribute_embedding(&tags, 16);
        let b = text_attribute_embedding(&tags, 16);
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn distinct_tags_distinct_embeddings() {
        let a = text_attribute_embedding(&["rainy".to_string()], 16);
        let b = text_attribute_embedding(&["sunny".to_string()], 16);
        assert_ne!(a, b);
    }

    #[test]
    fn unknown_tags_share_reserved_bucket() {
        let a = text_attribute_embedding(&["zorp".to_string()], 8);
        let b = text_attribute_embedding(&["blick".to_string()], 8);
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn embedding_unit_norm_any_tags(tags in proptest::collection::vec("[a-z]{0,8}", 0..4),
                                        dim in 1usize..32) {
            let tags: Vec<String> = tags;
            let e = text_attribute_embedding(&tags, dim);
            let norm: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-6);
        }
    }
}
