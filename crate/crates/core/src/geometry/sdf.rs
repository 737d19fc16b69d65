//! Density-field to signed-distance conversion: threshold the density on a
//! regular grid, run an exact Euclidean distance transform on the binary
//! occupancy (Felzenszwalb-Huttenlocher, separable exact squared EDT), and
//! sample the signed result at the tet lattice vertices. This is how the
//! volumetric phase hands its shape to the mesh phase.

use super::tet::TetGrid;
use crate::field::SampleField;
use crate::math::{vec3, Real};
use crate::{Error, Result};
use rayon::prelude::*;

const FAR: f64 = 1e20;

/// One-dimensional squared distance transform of sampled function `f`
/// (in place), under the parabola metric d(p) = min_q (p-q)^2 + f(q).
fn dt_1d(f: &mut [f64], v: &mut [usize], z: &mut [f64], d: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -f64::INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * q - 2 * p) as f64;
            if s <= z[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        d[q] = ((q as isize - p as isize) * (q as isize - p as isize)) as f64 + f[p];
    }
    f.copy_from_slice(&d[..n]);
}

/// Exact squared Euclidean distance (in voxel units) from every voxel to the
/// nearest `true` voxel. Voxels at `true` positions get 0; if the mask is
/// empty everything ends up at a huge sentinel value.
pub fn edt_3d(mask: &[bool], nx: usize, ny: usize, nz: usize) -> Vec<f64> {
    assert_eq!(mask.len(), nx * ny * nz);
    let idx = |x: usize, y: usize, z: usize| (z * ny + y) * nx + x;
    let mut dist: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { FAR }).collect();

    let max_n = nx.max(ny).max(nz);
    let mut f = vec![0.0; max_n];
    let mut d = vec![0.0; max_n];
    let mut v = vec![0usize; max_n];
    let mut z = vec![0.0; max_n + 1];

    // x pass
    for zz in 0..nz {
        for yy in 0..ny {
            for xx in 0..nx {
                f[xx] = dist[idx(xx, yy, zz)];
            }
            dt_1d(&mut f[..nx], &mut v, &mut z, &mut d);
            for xx in 0..nx {
                dist[idx(xx, yy, zz)] = f[xx];
            }
        }
    }
    // y pass
    for zz in 0..nz {
        for xx in 0..nx {
            for yy in 0..ny {
                f[yy] = dist[idx(xx, yy, zz)];
            }
            dt_1d(&mut f[..ny], &mut v, &mut z, &mut d);
            for yy in 0..ny {
                dist[idx(xx, yy, zz)] = f[yy];
            }
        }
    }
    // z pass
    for yy in 0..ny {
        for xx in 0..nx {
            for zz in 0..nz {
                f[zz] = dist[idx(xx, yy, zz)];
            }
            dt_1d(&mut f[..nz], &mut v, &mut z, &mut d);
            for zz in 0..nz {
                dist[idx(xx, yy, zz)] = f[zz];
            }
        }
    }
    dist
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DensityToSdfConfig {
    /// Regular sampling resolution per axis for the occupancy grid.
    pub grid_res: usize,
    /// Density threshold defining the occupied region.
    pub tau: f64,
}

impl Default for DensityToSdfConfig {
    fn default() -> Self {
        DensityToSdfConfig {
            grid_res: 80,
            tau: 2.5,
        }
    }
}

/// Initializes a tet grid's sdf from a density field: signed distance to the
/// tau level set (negative inside), with raw offsets reset to zero.
pub fn density_to_sdf<S: Real>(
    field: &dyn SampleField<S>,
    grid: &mut TetGrid<S>,
    cfg: &DensityToSdfConfig,
) -> Result<()> {
    let m = cfg.grid_res;
    if m < 8 {
        return Err(Error::config(format!(
            "density_to_sdf grid_res {m} too small"
        )));
    }
    let step = 2.0 / (m - 1) as f64;
    let lin = |i: usize| -1.0 + i as f64 * step;

    // occupancy sampling, parallel over z-slabs; each voxel independent
    let tau = S::of(cfg.tau);
    let mut mask = vec![false; m * m * m];
    mask.par_chunks_mut(m * m)
        .enumerate()
        .for_each(|(zz, slab)| {
            let pz = S::of(lin(zz));
            for yy in 0..m {
                let py = S::of(lin(yy));
                for xx in 0..m {
                    let p = vec3(S::of(lin(xx)), py, pz);
                    slab[yy * m + xx] = field.sample(p).density >= tau;
                }
            }
        });

    let inside = mask.iter().filter(|&&b| b).count();
    if inside == 0 {
        return Err(Error::geometry(
            "density_to_sdf: no voxel reaches the density threshold",
        ));
    }
    if inside == mask.len() {
        return Err(Error::geometry(
            "density_to_sdf: every voxel is above the density threshold",
        ));
    }

    let d2_inside = edt_3d(&mask, m, m, m);
    let outside_mask: Vec<bool> = mask.iter().map(|&b| !b).collect();
    let d2_outside = edt_3d(&outside_mask, m, m, m);
    let signed: Vec<f64> = d2_inside
        .iter()
        .zip(&d2_outside)
        .map(|(&din, &dout)| (din.sqrt() - dout.sqrt()) * step)
        .collect();

    // trilinear resample at the lattice vertices
    let sample = |p: crate::math::Vec3<S>| -> f64 {
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let u = ((p[a].as_f64() + 1.0) / step).clamp(0.0, (m - 1) as f64);
            let i = (u.floor() as usize).min(m - 2);
            base[a] = i;
            frac[a] = u - i as f64;
        }
        let mut acc = 0.0;
        for c in 0..8usize {
            let dx = c & 1;
            let dy = (c >> 1) & 1;
            let dz = (c >> 2) & 1;
            let w = (if dx == 1 { frac[0] } else { 1.0 - frac[0] })
                * (if dy == 1 { frac[1] } else { 1.0 - frac[1] })
                * (if dz == 1 { frac[2] } else { 1.0 - frac[2] });
            acc += w * signed[((base[2] + dz) * m + base[1] + dy) * m + base[0] + dx];
        }
        acc
    };

    for i in 0..grid.vertex_count() {
        grid.sdf[i] = S::of(sample(grid.base_position(i)));
    }
    grid.offsets.iter_mut().for_each(|o| *o = S::zero());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldSample, FnField};
    use crate::geometry::marching_tets;

    #[test]
    fn edt_1d_matches_brute_force() {
        let mut rng = crate::math::derive_rng(13, "edt1d", &[]);
        let n = 40;
        let mask: Vec<bool> = (0..n).map(|_| rand::Rng::gen_bool(&mut rng, 0.2)).collect();
        let mut f: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { FAR }).collect();
        let mut v = vec![0usize; n];
        let mut z = vec![0.0; n + 1];
        let mut d = vec![0.0; n];
        dt_1d(&mut f, &mut v, &mut z, &mut d);
        for q in 0..n {
            let brute = (0..n)
                .filter(|&p| mask[p])
                .map(|p| ((q as isize - p as isize).pow(2)) as f64)
                .fold(FAR, f64::min);
            assert_eq!(f[q], brute, "at {q}");
        }
    }

    #[test]
    fn edt_3d_matches_brute_force() {
        let (nx, ny, nz) = (9, 7, 8);
        let mut rng = crate::math::derive_rng(17, "edt3d", &[]);
        let mask: Vec<bool> = (0..nx * ny * nz)
            .map(|_| rand::Rng::gen_bool(&mut rng, 0.08))
            .collect();
        let d = edt_3d(&mask, nx, ny, nz);
        let features: Vec<(isize, isize, isize)> = (0..mask.len())
            .filter(|&i| mask[i])
            .map(|i| {
                (
                    (i % nx) as isize,
                    ((i / nx) % ny) as isize,
                    (i / (nx * ny)) as isize,
                )
            })
            .collect();
        assert!(!features.is_empty());
        for zz in 0..nz as isize {
            for yy in 0..ny as isize {
                for xx in 0..nx as isize {
                    let brute = features
                        .iter()
                        .map(|&(fx, fy, fz)| {
                            ((xx - fx).pow(2) + (yy - fy).pow(2) + (zz - fz).pow(2)) as f64
                        })
                        .fold(f64::INFINITY, f64::min);
                    let got = d[((zz * ny as isize + yy) * nx as isize + xx) as usize];
                    assert_eq!(got, brute, "at ({xx},{yy},{zz})");
                }
            }
        }
    }

    fn ball_density(r: f64) -> FnField<impl Fn(crate::math::Vec3<f64>) -> FieldSample<f64> + Sync> {
        FnField(move |p: crate::math::Vec3<f64>| FieldSample {
            density: if p.norm() < r { 10.0 } else { 0.0 },
            albedo: [0.5, 0.5, 0.5],
        })
    }

    #[test]
    fn sphere_density_becomes_signed_distance() {
        let r = 0.55;
        let field = ball_density(r);
        let mut grid = TetGrid::<f64>::new(20);
        let cfg = DensityToSdfConfig {
            grid_res: 64,
            tau: 2.5,
        };
        density_to_sdf(&field, &mut grid, &cfg).unwrap();

        let voxel = 2.0 / 63.0;
        let mut agree = 0usize;
        let mut total = 0usize;
        for i in 0..grid.vertex_count() {
            let p = grid.base_position(i);
            let exact = p.norm() - r;
            total += 1;
            if (grid.sdf[i] < 0.0) == (exact < 0.0) || exact.abs() < voxel {
                agree += 1;
            }
            // away from the surface the value should track the exact distance
            if exact.abs() > 0.1 && exact.abs() < 0.35 {
                assert!(
                    (grid.sdf[i] - exact).abs() < 2.0 * voxel,
                    "sdf {} vs exact {exact}",
                    grid.sdf[i]
                );
            }
        }
        assert!(agree as f64 / total as f64 >= 0.99, "{agree}/{total}");

        // and the mesh extracted from it is a closed surface near radius r
        let ex = marching_tets(&grid, None).unwrap();
        let v = ex.mesh.vertices.len();
        let e = ex.mesh.edges().len();
        let f = ex.mesh.faces.len();
        assert_eq!(v + f, e + 2);
        for vtx in &ex.mesh.vertices {
            assert!((vtx.norm() - r).abs() < 2.5 * voxel + grid.spacing() * 0.5);
        }
    }

    #[test]
    fn rejects_empty_and_full_level_sets() {
        let mut grid = TetGrid::<f64>::new(8);
        let empty = FnField(|_p: crate::math::Vec3<f64>| FieldSample {
            density: 0.0,
            albedo: [0.0; 3],
        });
        let cfg = DensityToSdfConfig::default();
        assert!(density_to_sdf(&empty, &mut grid, &cfg).is_err());
        let full = FnField(|_p: crate::math::Vec3<f64>| FieldSample {
            density: 100.0,
            albedo: [0.0; 3],
        });
        assert!(density_to_sdf(&full, &mut grid, &cfg).is_err());
    }
}
