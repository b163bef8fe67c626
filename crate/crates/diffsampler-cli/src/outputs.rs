//! Run artifacts: manifest, metrics.csv, samples.bin, scatter.svg.
//! Everything is written via temp file + rename so readers never see a
//! partial file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

use diffsampler::linalg::Tensor;
use diffsampler::trainer::RunReport;

pub const SAMPLES_MAGIC: &[u8; 8] = b"DSMPBIN1";

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Manifest = resolved config body + content hash + output layout.
/// The hash covers the body only, so re-serializing reproduces it.
pub fn manifest_text(body: &str) -> String {
    let mut h = Sha256::new();
    h.update(body.as_bytes());
    let digest = h.finalize();
    let mut hex = String::new();
    for b in digest {
        let _ = write!(hex, "{b:02x}");
    }
    format!("{body}config_hash = {hex}\nfiles = manifest.txt,metrics.csv,samples.bin,scatter.svg,run.ckpt\n")
}

/// metrics.csv with the pinned header. `timing` controls whether real
/// wall-clock milliseconds appear (default 0 keeps reruns byte-identical).
pub fn metrics_csv(report: &RunReport, timing: bool) -> String {
    let mut s = String::from(
        "iter,wall_ms,loss,log_z_theta,log_z_hat,log_z_rw,w2_sq,mode_count,nan_drops,eta\n",
    );
    for r in &report.rows {
        let wall = if timing { r.wall_ms } else { 0 };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            wall,
            r.loss,
            r.log_z_theta.map_or(String::new(), |v| v.to_string()),
            r.log_z_hat,
            r.log_z_rw,
            r.w2_sq.map_or(String::new(), |v| v.to_string()),
            r.mode_count.map_or(String::new(), |v| v.to_string()),
            r.nan_drops,
            r.eta,
        );
    }
    s
}

/// samples.bin: 16-byte header (magic, dim, count) then row-major
/// little-endian f64.
pub fn samples_bin(samples: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + samples.len() * 8);
    out.extend_from_slice(SAMPLES_MAGIC);
    out.extend_from_slice(&(samples.cols as u32).to_le_bytes());
    out.extend_from_slice(&(samples.rows as u32).to_le_bytes());
    for v in &samples.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[cfg(test)]
pub fn read_samples_bin(bytes: &[u8]) -> Result<Tensor> {
    anyhow::ensure!(bytes.len() >= 16, "samples file too short");
    anyhow::ensure!(&bytes[..8] == SAMPLES_MAGIC, "bad samples magic");
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    anyhow::ensure!(
        bytes.len() == 16 + dim * count * 8,
        "samples payload size mismatch"
    );
    let mut data = Vec::with_capacity(dim * count);
    for chunk in bytes[16..].chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok(Tensor::from_vec(count, dim, data))
}

/// Scatter plot of the first two coordinates (y = 0 for 1-D energies):
/// one circle element per sample.
pub fn scatter_svg(samples: &Tensor) -> String {
    let get = |r: usize, c: usize| -> f64 {
        if c < samples.cols {
            samples.at(r, c)
        } else {
            0.0
        }
    };
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (-1.0f64, 1.0f64, -1.0f64, 1.0f64);
    for r in 0..samples.rows {
        lo_x = lo_x.min(get(r, 0));
        hi_x = hi_x.max(get(r, 0));
        lo_y = lo_y.min(get(r, 1));
        hi_y = hi_y.max(get(r, 1));
    }
    let pad_x = 0.05 * (hi_x - lo_x);
    let pad_y = 0.05 * (hi_y - lo_y);
    let (w, h) = (640.0, 640.0);
    let sx = w / (hi_x - lo_x + 2.0 * pad_x);
    let sy = h / (hi_y - lo_y + 2.0 * pad_y);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{w}" height="{h}" fill="white" stroke="black"/>"#
    );
    for r in 0..samples.rows {
        let px = (get(r, 0) - lo_x + pad_x) * sx;
        let py = h - (get(r, 1) - lo_y + pad_y) * sy;
        let _ = writeln!(
            s,
            r#"<circle cx="{px:.2}" cy="{py:.2}" r="1.5" fill="steelblue" fill-opacity="0.5"/>"#
        );
    }
    s.push_str("</svg>\n");
    s
}

pub struct OutDir {
    pub dir: PathBuf,
}

impl OutDir {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(OutDir {
            dir: dir.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.path(name), bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_round_trip_bit_exactly() {
        let t = Tensor::from_vec(3, 2, vec![0.1, -2.5, f64::MIN_POSITIVE, 1e300, -0.0, 42.0]);
        let bytes = samples_bin(&t);
        assert_eq!(&bytes[..8], SAMPLES_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        let back = read_samples_bin(&bytes).unwrap();
        assert_eq!(back.data, t.data);
        assert_eq!((back.rows, back.cols), (3, 2));
    }

    #[test]
    fn svg_has_one_circle_per_sample() {
        let t = Tensor::from_vec(5, 2, vec![0.0; 10]);
        let svg = scatter_svg(&t);
        assert_eq!(svg.matches("<circle").count(), 5);
    }

    #[test]
    fn manifest_hash_is_reproducible() {
        let body = "energy = gmm25\nseed = 1\n";
        let a = manifest_text(body);
        let b = manifest_text(body);
        assert_eq!(a, b);
        assert!(a.contains("config_hash = "));
    }
}
