//! Binary scene container and CSV export.
//!
//! Layout (little-endian):
//!
//! ```text
//! "BDLS" | u16 version | u32 lidar count | u32 radar count | u32 box count
//! u8 tag (0 = lidar) | lidar count x 6 f64 (x, y, z, intensity, vx, vy)
//! u8 tag (1 = radar) | radar count x 6 f64
//! box count x (5 f64 (cx, cy, length, width, yaw) | u32 class id)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::{GtBox, Modality, Point, PointCloud, Scene};

pub const SCENE_MAGIC: &[u8; 4] = b"BDLS";
pub const SCENE_VERSION: u16 = 1;

pub fn encode_scene(scene: &Scene) -> Vec<u8> {
    let mut buf = Vec::with_capacity(
        18 + 2 + 48 * (scene.lidar.len() + scene.radar.len()) + 44 * scene.boxes.len(),
    );
    buf.extend_from_slice(SCENE_MAGIC);
    buf.extend_from_slice(&SCENE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(scene.lidar.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(scene.radar.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(scene.boxes.len() as u32).to_le_bytes());
    for cloud in [&scene.lidar, &scene.radar] {
        buf.push(cloud.modality.tag());
        for p in &cloud.points {
            for v in [p.x, p.y, p.z, p.intensity, p.vx, p.vy] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    for b in &scene.boxes {
        for v in [b.cx, b.cy, b.length, b.width, b.yaw] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&b.class_id.to_le_bytes());
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                message: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_scene(bytes: &[u8]) -> Result<Scene> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != SCENE_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic {magic:?}"),
        });
    }
    let version = r.u16("version")?;
    if version != SCENE_VERSION {
        return Err(Error::Parse {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let counts = [r.u32("lidar count")?, r.u32("radar count")?];
    let n_boxes = r.u32("box count")?;
    let mut clouds = Vec::with_capacity(2);
    for (expected, count) in [Modality::Lidar, Modality::Radar].into_iter().zip(counts) {
        let at = r.pos;
        let tag = r.u8("modality tag")?;
        let modality = Modality::from_tag(tag).ok_or_else(|| Error::Parse {
            offset: at,
            message: format!("unknown modality tag {tag}"),
        })?;
        if modality != expected {
            return Err(Error::Parse {
                offset: at,
                message: format!(
                    "expected {} section, found {}",
                    expected.as_str(),
                    modality.as_str()
                ),
            });
        }
        let mut cloud = PointCloud::new(modality);
        for _ in 0..count {
            cloud.points.push(Point {
                x: r.f64("point")?,
                y: r.f64("point")?,
                z: r.f64("point")?,
                intensity: r.f64("point")?,
                vx: r.f64("point")?,
                vy: r.f64("point")?,
            });
        }
        clouds.push(cloud);
    }
    let mut boxes = Vec::with_capacity(n_boxes as usize);
    for _ in 0..n_boxes {
        boxes.push(GtBox {
            cx: r.f64("box")?,
            cy: r.f64("box")?,
            length: r.f64("box")?,
            width: r.f64("box")?,
            yaw: r.f64("box")?,
            class_id: r.u32("box class")?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse {
            offset: r.pos,
            message: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    let radar = clouds.pop().expect("two sections");
    let lidar = clouds.pop().expect("two sections");
    Ok(Scene {
        lidar,
        radar,
        boxes,
    })
}

pub fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    fs::write(path, encode_scene(scene)).map_err(|e| Error::io(path, e))
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scene(&bytes)
}

/// Columns: `modality,x,y,z,intensity,vx,vy`.
pub fn write_scene_csv<W: Write>(mut out: W, scene: &Scene) -> std::io::Result<()> {
    writeln!(out, "modality,x,y,z,intensity,vx,vy")?;
    for cloud in [&scene.lidar, &scene.radar] {
        for p in &cloud.points {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                cloud.modality.as_str(),
                p.x,
                p.y,
                p.z,
                p.intensity,
                p.vx,
                p.vy
            )?;
        }
    }
    Ok(())
}
