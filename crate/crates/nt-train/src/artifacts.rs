//! Atomic file output plus the two netpbm writers used for inspection
//! artifacts. Everything lands via temp-file-then-rename so a crash never
//! leaves a half-written result behind.

use std::path::Path;

use crate::error::Result;

/// Writes bytes to `path` atomically: parent dirs are created, the data
/// goes to a sibling temp file first, then a rename moves it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
    }
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Binary PGM (P5), one byte per pixel, row-major.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height, "pgm pixel count");
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    atomic_write(path, &bytes)
}

/// Binary PPM (P6), three bytes per pixel, row-major RGB.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3, "ppm byte count");
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(rgb);
    atomic_write(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_creates_parents_and_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/out.txt");
        atomic_write(&path, b"one").unwrap();
        atomic_write(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        // No temp litter next to the target.
        let names: Vec<_> = std::fs::read_dir(path.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names, vec![std::ffi::OsString::from("out.txt")]);
    }

    #[test]
    fn pgm_and_ppm_headers_match_payload() {
        let dir = tempfile::tempdir().unwrap();
        let g = dir.path().join("g.pgm");
        write_pgm(&g, 3, 2, &[0, 60, 120, 180, 240, 255]).unwrap();
        let bytes = std::fs::read(&g).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), b"P5\n3 2\n255\n".len() + 6);

        let c = dir.path().join("c.ppm");
        write_ppm(&c, 1, 2, &[255, 0, 0, 0, 0, 255]).unwrap();
        let bytes = std::fs::read(&c).unwrap();
        assert!(bytes.starts_with(b"P6\n1 2\n255\n"));
        assert_eq!(bytes[bytes.len() - 6..], [255, 0, 0, 0, 0, 255]);
    }
}
