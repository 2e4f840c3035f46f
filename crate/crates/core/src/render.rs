//! Top-down SVG drawings of scenes and denoising trajectories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scene::Scene;

/// Coordinates are clamped to `±VIEW_EXTENT` before drawing.
pub const VIEW_EXTENT: f64 = 1.5;

const PALETTE: [&str; 10] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    /// Width and height of the image in pixels.
    pub size: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { size: 512.0 }
    }
}

pub fn class_color(class_id: usize) -> &'static str {
    PALETTE[class_id % PALETTE.len()]
}

fn clamp(v: f64) -> f64 {
    v.clamp(-VIEW_EXTENT, VIEW_EXTENT)
}

pub fn scene_svg(scene: &Scene, options: &RenderOptions) -> String {
    let size = options.size;
    let scale = size / (2.0 * VIEW_EXTENT);
    // World y points up; SVG y points down.
    let px = |p: [f64; 2]| ((clamp(p[0]) + VIEW_EXTENT) * scale, (VIEW_EXTENT - clamp(p[1])) * scale);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let points: Vec<String> = scene
        .floor
        .vertices()
        .iter()
        .map(|&v| {
            let (x, y) = px(v);
            format!("{x:.3},{y:.3}")
        })
        .collect();
    let _ = writeln!(
        out,
        r##"  <polygon class="floor" points="{}" fill="#f4f1ea" stroke="#333333" stroke-width="2"/>"##,
        points.join(" ")
    );
    for (i, o) in scene.objects.iter().enumerate() {
        let (cx, cy) = px(o.translation);
        let (w, h) = (2.0 * o.bbox[0] * scale, 2.0 * o.bbox[1] * scale);
        let deg = -o.angle().to_degrees();
        let color = class_color(o.class_id);
        let _ = writeln!(
            out,
            r#"  <g class="object" data-index="{i}" data-class="{}" transform="translate({cx:.3} {cy:.3}) rotate({deg:.3})">"#,
            o.class_id
        );
        let _ = writeln!(
            out,
            r##"    <rect x="{:.3}" y="{:.3}" width="{w:.3}" height="{h:.3}" fill="{color}" fill-opacity="0.8" stroke="#222222" stroke-width="1"/>"##,
            -w / 2.0,
            -h / 2.0
        );
        let _ = writeln!(
            out,
            r##"    <line x1="0" y1="0" x2="{:.3}" y2="0" stroke="#000000" stroke-width="2"/>"##,
            (w / 2.0).max(4.0)
        );
        let _ = writeln!(out, "  </g>");
    }
    out.push_str("</svg>\n");
    out
}

pub fn render_scene(scene: &Scene, out_path: &Path, options: &RenderOptions) -> Result<()> {
    write_text(out_path, &scene_svg(scene, options))
}

/// Writes `frame_{i:04}.svg` into `out_dir` for each snapshot and returns the
/// paths in order.
pub fn render_trajectory(snapshots: &[Scene], out_dir: &Path, options: &RenderOptions) -> Result<Vec<PathBuf>> {
    if snapshots.is_empty() {
        return Err(Error::InvalidScene("trajectory has no snapshots".into()));
    }
    snapshots
        .iter()
        .enumerate()
        .map(|(i, scene)| {
            let path = out_dir.join(format!("frame_{i:04}.svg"));
            render_scene(scene, &path, options)?;
            Ok(path)
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| Error::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, text).map_err(io)
}
