//! Mesh export: OBJ with a baked albedo atlas (plus MTL and PNG) and an
//! ASCII PLY with per-vertex colors. All numeric formatting is fixed so a
//! rerun with identical inputs produces byte-identical files.

use super::TriMesh;
use crate::field::SampleField;
use crate::image::Image;
use crate::math::Real;
use crate::{Error, Result};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AtlasConfig {
    /// Side length in texels of the square cell each face charts into.
    pub cell: usize,
    pub max_resolution: usize,
}

impl Default for AtlasConfig {
    fn default() -> Self {
        AtlasConfig {
            cell: 8,
            max_resolution: 4096,
        }
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `stem.obj`, `stem.mtl`, and `stem_albedo.png` into `dir`. Each face
/// gets its own triangular chart in a grid atlas; texels are filled by
/// sampling the field at the corresponding surface point, with a margin so
/// bilinear texture lookups near edges stay inside the chart.
pub fn export_obj<S: Real>(
    dir: &Path,
    stem: &str,
    mesh: &TriMesh<S>,
    field: &dyn SampleField<S>,
    atlas: &AtlasConfig,
) -> Result<Vec<PathBuf>> {
    if mesh.faces.is_empty() {
        return Err(Error::geometry("export_obj: mesh has no faces"));
    }
    let f = mesh.faces.len();
    let grid = (f as f64).sqrt().ceil() as usize;
    let cell = atlas.cell.max(4);
    let res = (grid * cell).min(atlas.max_resolution);
    let cell = res / grid;
    if cell < 4 {
        return Err(Error::config(format!(
            "atlas cannot fit {f} faces at max resolution {}",
            atlas.max_resolution
        )));
    }

    // chart corners per face, in texels: a right triangle inset by one texel
    let margin = 1.0;
    let chart = |k: usize| -> [(f64, f64); 3] {
        let cx = (k % grid * cell) as f64;
        let cy = (k / grid * cell) as f64;
        let c = cell as f64;
        [
            (cx + margin, cy + margin),
            (cx + c - margin, cy + margin),
            (cx + margin, cy + c - margin),
        ]
    };

    // bake the atlas
    let mut tex = Image::<S>::zeros(res, res, 3);
    for (k, &[ia, ib, ic]) in mesh.faces.iter().enumerate() {
        let uv = chart(k);
        let pa = mesh.vertices[ia as usize];
        let pb = mesh.vertices[ib as usize];
        let pc = mesh.vertices[ic as usize];
        let x0 = (k % grid) * cell;
        let y0 = (k / grid) * cell;
        for py in y0..y0 + cell {
            for px in x0..x0 + cell {
                // barycentric in the chart triangle (axis-aligned right tri)
                let fx = (px as f64 + 0.5 - uv[0].0) / (uv[1].0 - uv[0].0);
                let fy = (py as f64 + 0.5 - uv[0].1) / (uv[2].1 - uv[0].1);
                // dilate by clamping instead of skipping: border texels take
                // the color of the nearest interior point
                let (l1, l2) = clamp_bary(fx, fy);
                let l0 = 1.0 - l1 - l2;
                let p = pa * S::of(l0) + pb * S::of(l1) + pc * S::of(l2);
                let s = field.sample(p);
                let px_out = tex.pixel_mut(py, px);
                px_out[0] = s.albedo[0];
                px_out[1] = s.albedo[1];
                px_out[2] = s.albedo[2];
            }
        }
    }

    let normals = mesh.vertex_normals();
    let mut obj = String::new();
    let _ = writeln!(obj, "mtllib {stem}.mtl");
    let _ = writeln!(obj, "o {stem}");
    for v in &mesh.vertices {
        let _ = writeln!(
            obj,
            "v {:.6} {:.6} {:.6}",
            v.x.as_f64(),
            v.y.as_f64(),
            v.z.as_f64()
        );
    }
    for k in 0..f {
        for (u, vv) in chart(k) {
            let _ = writeln!(obj, "vt {:.6} {:.6}", u / res as f64, 1.0 - vv / res as f64);
        }
    }
    for n in &normals {
        let _ = writeln!(
            obj,
            "vn {:.6} {:.6} {:.6}",
            n.x.as_f64(),
            n.y.as_f64(),
            n.z.as_f64()
        );
    }
    let _ = writeln!(obj, "usemtl material0");
    for (k, &[a, b, c]) in mesh.faces.iter().enumerate() {
        let _ = writeln!(
            obj,
            "f {}/{}/{} {}/{}/{} {}/{}/{}",
            a + 1,
            3 * k + 1,
            a + 1,
            b + 1,
            3 * k + 2,
            b + 1,
            c + 1,
            3 * k + 3,
            c + 1
        );
    }

    let mtl = format!(
        "newmtl material0\nKa 0.000000 0.000000 0.000000\nKd 1.000000 1.000000 1.000000\nKs 0.000000 0.000000 0.000000\nmap_Kd {stem}_albedo.png\n"
    );

    let obj_path = dir.join(format!("{stem}.obj"));
    let mtl_path = dir.join(format!("{stem}.mtl"));
    let png_path = dir.join(format!("{stem}_albedo.png"));
    write_bytes(&obj_path, obj.as_bytes())?;
    write_bytes(&mtl_path, mtl.as_bytes())?;
    tex.save_png(&png_path)?;
    Ok(vec![obj_path, mtl_path, png_path])
}

fn clamp_bary(fx: f64, fy: f64) -> (f64, f64) {
    let mut l1 = fx.max(0.0);
    let mut l2 = fy.max(0.0);
    let s = l1 + l2;
    if s > 1.0 {
        l1 /= s;
        l2 /= s;
    }
    (l1, l2)
}

/// ASCII PLY with per-vertex normals and colors sampled from the field.
pub fn export_ply<S: Real>(
    path: &Path,
    mesh: &TriMesh<S>,
    field: &dyn SampleField<S>,
) -> Result<()> {
    let normals = mesh.vertex_normals();
    let mut out = String::new();
    let _ = writeln!(out, "ply");
    let _ = writeln!(out, "format ascii 1.0");
    let _ = writeln!(out, "element vertex {}", mesh.vertices.len());
    for prop in ["x", "y", "z", "nx", "ny", "nz"] {
        let _ = writeln!(out, "property float {prop}");
    }
    for prop in ["red", "green", "blue"] {
        let _ = writeln!(out, "property uchar {prop}");
    }
    let _ = writeln!(out, "element face {}", mesh.faces.len());
    let _ = writeln!(out, "property list uchar int vertex_indices");
    let _ = writeln!(out, "end_header");
    for (v, n) in mesh.vertices.iter().zip(&normals) {
        let s = field.sample(*v);
        let q = |c: S| (crate::math::clamp01(c).as_f64() * 255.0).round() as u8;
        let _ = writeln!(
            out,
            "{:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {} {} {}",
            v.x.as_f64(),
            v.y.as_f64(),
            v.z.as_f64(),
            n.x.as_f64(),
            n.y.as_f64(),
            n.z.as_f64(),
            q(s.albedo[0]),
            q(s.albedo[1]),
            q(s.albedo[2])
        );
    }
    for &[a, b, c] in &mesh.faces {
        let _ = writeln!(out, "3 {a} {b} {c}");
    }
    write_bytes(path, out.as_bytes())
}

/// Writes the full deliverable set for a mesh: OBJ + MTL + albedo PNG + PLY.
pub fn export_mesh<S: Real>(
    dir: &Path,
    stem: &str,
    mesh: &TriMesh<S>,
    field: &dyn SampleField<S>,
    atlas: &AtlasConfig,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = export_obj(dir, stem, mesh, field, atlas)?;
    let ply = dir.join(format!("{stem}.ply"));
    export_ply(&ply, mesh, field)?;
    paths.push(ply);
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldSample, FnField};
    use crate::geometry::{marching_tets, TetGrid};
    use crate::math::Vec3;

    fn small_sphere() -> TriMesh<f64> {
        let mut grid = TetGrid::new(7);
        for i in 0..grid.vertex_count() {
            let p = grid.base_position(i);
            grid.sdf[i] = p.norm() - 0.6;
        }
        marching_tets(&grid, None).unwrap().mesh
    }

    fn stripes() -> FnField<impl Fn(Vec3<f64>) -> FieldSample<f64> + Sync> {
        FnField(|p: Vec3<f64>| FieldSample {
            density: 10.0,
            albedo: [
                0.5 + 0.5 * (p.x * 20.0).sin(),
                0.3,
                0.5 - 0.5 * (p.x * 20.0).sin(),
            ],
        })
    }

    #[test]
    fn export_is_byte_identical_across_runs() {
        let mesh = small_sphere();
        let field = stripes();
        let base = std::env::temp_dir().join(format!("mvfuse-export-{}", std::process::id()));
        let d1 = base.join("a");
        let d2 = base.join("b");
        export_mesh(&d1, "shape", &mesh, &field, &AtlasConfig::default()).unwrap();
        export_mesh(&d2, "shape", &mesh, &field, &AtlasConfig::default()).unwrap();
        for name in ["shape.obj", "shape.mtl", "shape_albedo.png", "shape.ply"] {
            let a = std::fs::read(d1.join(name)).unwrap();
            let b = std::fs::read(d2.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }
        std::fs::remove_dir_all(&base).ok();
    }

    #[test]
    fn obj_counts_match_mesh() {
        let mesh = small_sphere();
        let field = stripes();
        let dir = std::env::temp_dir().join(format!("mvfuse-objcheck-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        export_obj(&dir, "m", &mesh, &field, &AtlasConfig::default()).unwrap();
        let text = std::fs::read_to_string(dir.join("m.obj")).unwrap();
        let count = |p: &str| text.lines().filter(|l| l.starts_with(p)).count();
        assert_eq!(count("v "), mesh.vertices.len());
        assert_eq!(count("vn "), mesh.vertices.len());
        assert_eq!(count("vt "), 3 * mesh.faces.len());
        assert_eq!(count("f "), mesh.faces.len());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn empty_mesh_is_rejected() {
        let mesh = TriMesh::<f64> {
            vertices: vec![],
            faces: vec![],
        };
        let field = stripes();
        let dir = std::env::temp_dir();
        assert!(export_obj(&dir, "x", &mesh, &field, &AtlasConfig::default()).is_err());
    }
}
