//! ASCII OFF parsing/serialization and uniform surface sampling of triangle
//! meshes.
//!
//! The parser accepts the malformed-but-common header variant where the
//! counts are fused onto the `OFF` token line (`OFF490 518 0`), which occurs
//! in ModelNet40 files.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cloud::PointCloud;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("line {line}: malformed OFF header: {msg}")]
    MalformedHeader { line: usize, msg: String },
    #[error("line {line}: malformed vertex: {msg}")]
    MalformedVertex { line: usize, msg: String },
    #[error("line {line}: face has {arity} vertices, only triangles are supported")]
    NonTriangleFace { line: usize, arity: usize },
    #[error("line {line}: face index {index} out of range (mesh has {n_vertices} vertices)")]
    FaceIndexOutOfRange {
        line: usize,
        index: usize,
        n_vertices: usize,
    },
    #[error("line {line}: malformed face: {msg}")]
    MalformedFace { line: usize, msg: String },
    #[error("line {line}: input ended before {expected} declared {what} lines were read")]
    CountMismatch {
        line: usize,
        expected: usize,
        what: &'static str,
    },
    #[error("mesh has zero total surface area")]
    ZeroSurfaceArea,
    #[error("need at least {needed} sample points, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("input is not valid UTF-8/ASCII")]
    NotText,
}

/// An indexed triangle mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    /// Area of face `f` (half the cross-product norm).
    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f];
        let (a, b, c) = (
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        );
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let cross = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        0.5 * (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt()
    }
}

/// Lines paired with their 1-based position in the file, comments and blank
/// lines removed.
struct ContentLines<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    /// Line number of the most recently yielded line (or last line seen).
    pub last_line: usize,
}

impl<'a> ContentLines<'a> {
    fn new(text: &'a str) -> Self {
        ContentLines {
            lines: text.lines().enumerate(),
            last_line: 0,
        }
    }

    fn next(&mut self) -> Option<(usize, &'a str)> {
        for (idx, raw) in self.lines.by_ref() {
            self.last_line = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            return Some((idx + 1, line));
        }
        None
    }
}

fn parse_counts(s: &str, line: usize) -> Result<(usize, usize), MeshError> {
    let mut it = s.split_whitespace();
    let mut next_count = |what: &str| -> Result<usize, MeshError> {
        it.next()
            .ok_or_else(|| MeshError::MalformedHeader {
                line,
                msg: format!("missing {what} count"),
            })?
            .parse::<usize>()
            .map_err(|e| MeshError::MalformedHeader {
                line,
                msg: format!("bad {what} count: {e}"),
            })
    };
    let nv = next_count("vertex")?;
    let nf = next_count("face")?;
    next_count("edge")?; // declared but unused
    if it.next().is_some() {
        return Err(MeshError::MalformedHeader {
            line,
            msg: "trailing tokens after counts".into(),
        });
    }
    Ok((nv, nf))
}

/// Parse an ASCII OFF mesh.
pub fn parse_off(bytes: &[u8]) -> Result<TriangleMesh, MeshError> {
    let text = std::str::from_utf8(bytes).map_err(|_| MeshError::NotText)?;
    let mut lines = ContentLines::new(text);

    let (header_line, header) = lines.next().ok_or(MeshError::MalformedHeader {
        line: 1,
        msg: "empty input".into(),
    })?;
    let (nv, nf) = if header == "OFF" {
        let (count_line, counts) = lines.next().ok_or(MeshError::MalformedHeader {
            line: header_line,
            msg: "missing count line after OFF".into(),
        })?;
        parse_counts(counts, count_line)?
    } else if let Some(rest) = header.strip_prefix("OFF") {
        // ModelNet40 quirk: counts fused onto the header line ("OFF490 518 0").
        parse_counts(rest, header_line)?
    } else {
        return Err(MeshError::MalformedHeader {
            line: header_line,
            msg: format!("expected OFF, found {header:?}"),
        });
    };

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (line, content) = lines.next().ok_or(MeshError::CountMismatch {
            line: lines.last_line,
            expected: nv,
            what: "vertex",
        })?;
        let coords: Vec<&str> = content.split_whitespace().collect();
        if coords.len() != 3 {
            return Err(MeshError::MalformedVertex {
                line,
                msg: format!("expected 3 coordinates, found {}", coords.len()),
            });
        }
        let mut v = [0.0; 3];
        for (slot, tok) in v.iter_mut().zip(&coords) {
            *slot = tok.parse::<f64>().map_err(|e| MeshError::MalformedVertex {
                line,
                msg: format!("bad coordinate {tok:?}: {e}"),
            })?;
        }
        vertices.push(v);
    }

    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (line, content) = lines.next().ok_or(MeshError::CountMismatch {
            line: lines.last_line,
            expected: nf,
            what: "face",
        })?;
        let toks: Vec<&str> = content.split_whitespace().collect();
        let arity: usize = toks
            .first()
            .ok_or(MeshError::MalformedFace {
                line,
                msg: "empty face line".into(),
            })?
            .parse()
            .map_err(|e| MeshError::MalformedFace {
                line,
                msg: format!("bad vertex count: {e}"),
            })?;
        if arity != 3 {
            return Err(MeshError::NonTriangleFace { line, arity });
        }
        if toks.len() != 4 {
            return Err(MeshError::MalformedFace {
                line,
                msg: format!("expected 3 indices, found {}", toks.len() - 1),
            });
        }
        let mut f = [0u32; 3];
        for (slot, tok) in f.iter_mut().zip(&toks[1..]) {
            let index: usize = tok.parse().map_err(|e| MeshError::MalformedFace {
                line,
                msg: format!("bad index {tok:?}: {e}"),
            })?;
            if index >= nv {
                return Err(MeshError::FaceIndexOutOfRange {
                    line,
                    index,
                    n_vertices: nv,
                });
            }
            *slot = index as u32;
        }
        faces.push(f);
    }

    Ok(TriangleMesh { vertices, faces })
}

/// Serialize back to canonical ASCII OFF. `f64` Display round-trips exactly,
/// so parse ∘ write ∘ parse is the identity.
pub fn write_off(mesh: &TriangleMesh) -> String {
    let mut out = String::from("OFF\n");
    out.push_str(&format!("{} {} 0\n", mesh.n_vertices(), mesh.n_faces()));
    for v in &mesh.vertices {
        out.push_str(&format!("{} {} {}\n", v[0], v[1], v[2]));
    }
    for f in &mesh.faces {
        out.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
    }
    out
}

/// Sample `n` points uniformly from the mesh surface: faces are chosen with
/// probability proportional to area, positions by the square-root barycentric
/// trick. Deterministic for a given seed.
pub fn sample_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<PointCloud, MeshError> {
    let (points, _) = sample_surface_tracked(mesh, n, seed)?;
    Ok(PointCloud::new(points, None, None))
}

/// Like [`sample_surface`] but also reports the source face of every sample,
/// for debugging and on-surface checks.
pub fn sample_surface_tracked(
    mesh: &TriangleMesh,
    n: usize,
    seed: u64,
) -> Result<(Array2<f64>, Vec<u32>), MeshError> {
    if n < 2 {
        return Err(MeshError::TooFewSamples { needed: 2, got: n });
    }
    let mut cumulative = Vec::with_capacity(mesh.n_faces());
    let mut total = 0.0;
    for f in 0..mesh.n_faces() {
        total += mesh.face_area(f);
        cumulative.push(total);
    }
    if total.is_nan() || total <= 0.0 {
        return Err(MeshError::ZeroSurfaceArea);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Array2::zeros((n, 3));
    let mut source_faces = Vec::with_capacity(n);
    for i in 0..n {
        let r = rng.gen::<f64>() * total;
        // First face whose cumulative area exceeds r; zero-area faces share
        // their predecessor's cumulative value and can never be selected.
        let mut f = cumulative.partition_point(|&c| c <= r);
        if f == mesh.n_faces() {
            f = cumulative.partition_point(|&c| c < total);
        }
        let [ia, ib, ic] = mesh.faces[f];
        let (a, b, c) = (
            mesh.vertices[ia as usize],
            mesh.vertices[ib as usize],
            mesh.vertices[ic as usize],
        );
        let su = rng.gen::<f64>().sqrt();
        let v = rng.gen::<f64>();
        let (wa, wb, wc) = (1.0 - su, su * (1.0 - v), su * v);
        for d in 0..3 {
            points[[i, d]] = wa * a[d] + wb * b[d] + wc * c[d];
        }
        source_faces.push(f as u32);
    }
    Ok((points, source_faces))
}
