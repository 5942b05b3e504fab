//! File formats: CATN tensors, netpbm rasters, prompt configs and box manifests.

pub mod catn;
pub mod config;
pub mod netpbm;

use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, Axis, Ix3, IxDyn};

use crate::diffusion::RegionKey;
use crate::error::{Error, Result};
use crate::image::RegionBox;
use crate::probe::AttentionFixture;
use crate::text::RegionLabel;

pub use catn::{read_tensor, write_tensor};
pub use config::PromptConfig;
pub use netpbm::{read_pgm, read_ppm, write_pgm, write_ppm};

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// One `label x1 x2 y1 y2` line per box.
pub fn encode_manifest(boxes: &[(RegionKey, RegionBox)]) -> String {
    boxes.iter().map(|(k, b)| format!("{k} {} {} {} {}\n", b.x1, b.x2, b.y1, b.y2)).collect()
}

pub fn decode_manifest(text: &str) -> Result<Vec<(RegionKey, RegionBox)>> {
    let bad = |n: usize, m: &str| Error::Format {
        what: "manifest",
        message: format!("line {n}: {m}"),
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [label, x1, x2, y1, y2] = fields[..] else {
            return Err(bad(i + 1, "expected label x1 x2 y1 y2"));
        };
        let key = parse_key(label).ok_or_else(|| bad(i + 1, &format!("bad label {label}")))?;
        let coord = |s: &str| s.parse::<usize>().map_err(|_| bad(i + 1, &format!("bad coordinate {s}")));
        out.push((key, RegionBox::new(coord(x1)?, coord(x2)?, coord(y1)?, coord(y2)?)));
    }
    Ok(out)
}

/// Inverse of `RegionKey`'s display form `char{j}_{label}`.
pub fn parse_key(s: &str) -> Option<RegionKey> {
    let (j, label) = s.strip_prefix("char")?.split_once('_')?;
    Some(RegionKey::new(j.parse().ok()?, label.parse::<RegionLabel>().ok()?))
}

/// Fixture as a rank-4 `layers x words x h x w` tensor.
pub fn fixture_to_tensor(fixture: &AttentionFixture) -> Result<ArrayD<f32>> {
    let first = fixture.layers.first().ok_or_else(|| Error::InvalidParameter("fixture has no layers".into()))?;
    let (n, h, w) = first.dim();
    let mut out = ArrayD::zeros(IxDyn(&[fixture.num_layers(), n, h, w]));
    for (k, layer) in fixture.layers.iter().enumerate() {
        if layer.dim() != (n, h, w) {
            return Err(Error::shape(first.shape(), layer.shape()));
        }
        out.index_axis_mut(Axis(0), k).assign(&layer.view().into_dyn());
    }
    Ok(out)
}

pub fn tensor_to_fixture(tensor: &ArrayD<f32>) -> Result<AttentionFixture> {
    if tensor.ndim() != 4 {
        return Err(Error::Format {
            what: "fixture",
            message: format!("expected a rank-4 tensor, got rank {}", tensor.ndim()),
        });
    }
    let layers = tensor
        .axis_iter(Axis(0))
        .map(|l| l.to_owned().into_dimensionality::<Ix3>().expect("rank checked"))
        .collect();
    Ok(AttentionFixture::new(layers))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let boxes = vec![
            (RegionKey::new(1, RegionLabel::Face), RegionBox::new(1, 8, 1, 4)),
            (RegionKey::new(2, RegionLabel::Lower), RegionBox::new(3, 5, 9, 16)),
        ];
        let text = encode_manifest(&boxes);
        assert_eq!(text.lines().next(), Some("char1_face 1 8 1 4"));
        assert_eq!(decode_manifest(&text).unwrap(), boxes);
        assert!(decode_manifest("char1_face 1 2 3").is_err());
        assert!(decode_manifest("face 1 2 3 4").is_err());
    }

    #[test]
    fn fixture_tensor_round_trip() {
        let f = AttentionFixture::new((0..3).map(|k| ndarray::Array3::from_elem((2, 4, 4), k as f32)).collect());
        let t = fixture_to_tensor(&f).unwrap();
        assert_eq!(t.shape(), &[3, 2, 4, 4]);
        assert_eq!(tensor_to_fixture(&t).unwrap(), f);
        assert!(tensor_to_fixture(&t.index_axis(Axis(0), 0).to_owned()).is_err());
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
